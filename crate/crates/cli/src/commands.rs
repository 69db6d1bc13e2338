use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use serde_json::{json, Value};
use treecaps::ast::{
    generate_synthetic_corpus, split, write_class_manifest, write_dataset, ClassManifest,
    SyntheticSpec,
};
use treecaps::embeddings::{pretrain_skipgram, SkipGramConfig};
use treecaps::io::write_atomic;
use treecaps::training::{
    evaluate as evaluate_model, metrics_csv, train_with, Checkpoint, Ensemble, TrainConfig,
    TrainError,
};
use treecaps::{Tree, Variant, Vocabulary};

use crate::data::{
    check_labels, parse_variant, read_samples, ExperimentConfig, Prepared, CLASSES_FILE, TEST_FILE,
    TRAIN_FILE, VAL_FILE, VOCAB_FILE,
};
use crate::failure::{Classify, CmdResult, Failure};

fn classify(e: TrainError) -> Failure {
    match e {
        TrainError::Config(_)
        | TrainError::EmptySplit(_)
        | TrainError::Label { .. }
        | TrainError::Incompatible(_) => Failure::Input(e.into()),
        _ => Failure::Runtime(e.into()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    write_atomic(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .or_runtime()
}

pub struct PrepareArgs {
    pub input: Option<PathBuf>,
    pub classes: Option<PathBuf>,
    pub synthetic_spec: Option<PathBuf>,
    pub samples_per_class: usize,
    pub out: PathBuf,
    pub seed: u64,
    pub split: Vec<f64>,
}

pub fn prepare(args: PrepareArgs) -> CmdResult {
    let ratios: [f64; 3] = args.split.as_slice().try_into().map_err(|_| {
        Failure::input(format!(
            "--split needs three fractions, got {}",
            args.split.len()
        ))
    })?;
    let (samples, class_names) = match (&args.input, &args.synthetic_spec) {
        (Some(input), None) => {
            let samples = read_samples(input)?;
            let names = match &args.classes {
                Some(path) => std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read {}", path.display()))
                    .or_input()?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                None => {
                    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
                    (0..classes)
                        .map(|c| format!("class_{c}"))
                        .collect::<Vec<_>>()
                }
            };
            check_labels(&samples, names.len(), input)?;
            (samples, names)
        }
        (None, Some(spec_path)) => {
            let bytes = std::fs::read(spec_path)
                .with_context(|| format!("cannot read {}", spec_path.display()))
                .or_input()?;
            let spec = SyntheticSpec::from_json(&bytes)
                .with_context(|| spec_path.display().to_string())
                .or_input()?;
            let samples =
                generate_synthetic_corpus(&spec, args.samples_per_class, args.seed).or_input()?;
            (samples, spec.class_names())
        }
        _ => {
            return Err(Failure::input(
                "give exactly one of --input or --synthetic-spec",
            ))
        }
    };
    let parts = split(&samples, ratios, args.seed).or_input()?;
    let vocab = Vocabulary::build(&parts.train);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .or_input()?;
    for (name, part) in [
        (TRAIN_FILE, &parts.train),
        (VAL_FILE, &parts.validation),
        (TEST_FILE, &parts.test),
    ] {
        write(&args.out.join(name), &write_dataset(part))?;
    }
    vocab.save(&args.out.join(VOCAB_FILE)).or_runtime()?;
    write_class_manifest(
        &args.out.join(CLASSES_FILE),
        &ClassManifest::from_names(class_names.clone()),
    )
    .or_runtime()?;
    println!(
        "{} classes, {} train / {} validation / {} test samples, {} node types",
        class_names.len(),
        parts.train.len(),
        parts.validation.len(),
        parts.test.len(),
        vocab.len()
    );
    Ok(())
}

pub fn pretrain(data: &Path, cfg: &SkipGramConfig, out: &Path) -> CmdResult {
    let prepared = Prepared::load(data, None)?;
    let table = pretrain_skipgram(&prepared.split.train, &prepared.vocab, cfg).or_input()?;
    let text = table.to_text().or_input()?;
    write(out, text.as_bytes())?;
    println!(
        "wrote {} x {} embeddings to {}",
        prepared.vocab.len(),
        cfg.dim,
        out.display()
    );
    Ok(())
}

#[derive(clap::Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Text-format embeddings to start from.
    #[arg(long)]
    pub init_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// standard, dmp-ablation or secondary-layer
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub ensemble_size: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.variant {
            t.model.variant = v;
        }
        if let Some(v) = &self.init_embeddings {
            cfg.embeddings = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint_dir {
            cfg.checkpoint_dir = v.clone();
        }
        if let Some(v) = self.ensemble_size {
            cfg.ensemble_size = v;
        }
    }
}

pub fn train(config: &Path, overrides: &TrainOverrides) -> CmdResult {
    let mut cfg = ExperimentConfig::load(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let data = Prepared::load(&cfg.dataset, cfg.vocabulary.as_deref())?;
    let init = cfg.init_embeddings(&data.vocab)?;
    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .with_context(|| format!("cannot create {}", cfg.checkpoint_dir.display()))
        .or_input()?;

    for member in 0..cfg.ensemble_size {
        let train_cfg = TrainConfig {
            seed: cfg.train.seed + member as u64,
            ..cfg.train.clone()
        };
        let out = train_with(
            &data.split.train,
            &data.split.validation,
            &data.vocab,
            &data.class_names,
            &train_cfg,
            init.as_ref(),
            |r| {
                eprintln!(
                    "model {} epoch {}: train loss {:.6}, validation accuracy {:.4}",
                    member + 1,
                    r.epoch,
                    r.train_loss,
                    r.val_accuracy
                )
            },
        )
        .map_err(classify)?;
        let ckpt = cfg
            .checkpoint_dir
            .join(format!("model-{}.ckpt", member + 1));
        out.checkpoint
            .save(&ckpt)
            .with_context(|| format!("cannot write {}", ckpt.display()))
            .or_runtime()?;
        write(
            &cfg.checkpoint_dir
                .join(format!("metrics-{}.csv", member + 1)),
            metrics_csv(&out.history).as_bytes(),
        )?;
        println!(
            "{}: best epoch {}, validation accuracy {:.4}",
            ckpt.display(),
            out.best_epoch,
            out.checkpoint.validation_accuracy.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> CmdResult<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| path.display().to_string())
        .or_input()
}

fn to_json_value<T: serde::Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("report serializes")
}

pub fn evaluate(
    checkpoints: &[PathBuf],
    data: &Path,
    weights: Option<Vec<f64>>,
    out: Option<&Path>,
) -> CmdResult {
    let members = checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<CmdResult<Vec<_>>>()?;
    let samples = read_samples(data)?;
    let names = members[0].class_names.clone();
    check_labels(&samples, names.len(), data)?;
    let ensemble = if members.len() > 1 || weights.is_some() {
        Some(Ensemble::new(members.clone(), weights).map_err(classify)?)
    } else {
        None
    };

    let mut rows = Vec::new();
    for (path, member) in checkpoints.iter().zip(&members) {
        let ev = evaluate_model(&member.model, &samples, &member.class_names).map_err(classify)?;
        rows.push(
            json!({ "checkpoint": path.display().to_string(), "evaluation": to_json_value(&ev) }),
        );
    }
    let mut report = json!({ "data": data.display().to_string(), "members": rows });
    if let Some(ensemble) = &ensemble {
        let ev = ensemble.evaluate(&samples).map_err(classify)?;
        report["ensemble"] =
            json!({ "weights": ensemble.weights(), "evaluation": to_json_value(&ev) });
    }
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    print!("{text}");
    if let Some(out) = out {
        write(out, text.as_bytes())?;
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, tree: &Path) -> CmdResult {
    let ckpt = load_checkpoint(checkpoint)?;
    let bytes = std::fs::read(tree)
        .with_context(|| format!("cannot read {}", tree.display()))
        .or_input()?;
    let tree = Tree::parse(&bytes)
        .with_context(|| tree.display().to_string())
        .or_input()?;
    let pred = ckpt.model.predict(&tree).or_runtime()?;
    let probabilities: Vec<Value> = ckpt
        .class_names
        .iter()
        .zip(&pred.probabilities)
        .map(|(name, p)| json!({ "class": name, "probability": p }))
        .collect();
    let report = json!({
        "class": ckpt.class_names[pred.class],
        "label": pred.class,
        "probabilities": probabilities,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

/// `cfg` with the dotted `param` replaced by `value`. Values that parse as
/// JSON are used as such, anything else as a string.
fn with_param(cfg: &TrainConfig, param: &str, value: &str) -> CmdResult<TrainConfig> {
    let path = match param {
        "D_cc" => "model.code_dim",
        "variant" => "model.variant",
        other => other,
    };
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    let mut slot = &mut root;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Failure::input(format!("unknown parameter {param:?}")))?;
    }
    *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let out: TrainConfig = serde_json::from_value(root)
        .with_context(|| format!("{param} = {value}"))
        .or_input()?;
    out.validate()
        .map_err(|e| Failure::input(format!("{param} = {value}: {e}")))?;
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn sweep(
    config: &Path,
    param: &str,
    values: &[String],
    trials: usize,
    out: Option<&Path>,
) -> CmdResult {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate()?;
    if trials == 0 {
        return Err(Failure::input("--trials must be at least 1"));
    }
    let settings = values
        .iter()
        .map(|v| with_param(&cfg.train, param, v))
        .collect::<CmdResult<Vec<_>>>()?;
    let data = Prepared::load(&cfg.dataset, cfg.vocabulary.as_deref())?;
    let init = cfg.init_embeddings(&data.vocab)?;

    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..trials).map(move |t| (s, t)))
        .collect();
    let results: Vec<Result<f64, String>> = jobs
        .par_iter()
        .map(|&(s, t)| {
            let train_cfg = TrainConfig {
                seed: settings[s].seed + t as u64,
                ..settings[s].clone()
            };
            let run = || -> Result<f64, TrainError> {
                let out = train_with(
                    &data.split.train,
                    &data.split.validation,
                    &data.vocab,
                    &data.class_names,
                    &train_cfg,
                    init.as_ref(),
                    |_| {},
                )?;
                Ok(
                    evaluate_model(&out.checkpoint.model, &data.split.test, &data.class_names)?
                        .accuracy,
                )
            };
            let result = run().map_err(|e| e.to_string());
            match &result {
                Ok(acc) => eprintln!(
                    "{param}={} trial {}: test accuracy {acc:.4}",
                    values[s],
                    t + 1
                ),
                Err(e) => eprintln!("{param}={} trial {} failed: {e}", values[s], t + 1),
            }
            result
        })
        .collect();

    let mut csv = String::from("param,value,trials,failed,mean_accuracy,std_accuracy\n");
    let mut failures = 0;
    for (s, value) in values.iter().enumerate() {
        let chunk = &results[s * trials..(s + 1) * trials];
        let accs: Vec<f64> = chunk
            .iter()
            .filter_map(|r| r.as_ref().ok().copied())
            .collect();
        let failed = trials - accs.len();
        failures += failed;
        let (mean, std) = if accs.is_empty() {
            (String::new(), String::new())
        } else {
            let (m, s) = mean_std(&accs);
            (m.to_string(), s.to_string())
        };
        csv.push_str(&format!("{param},{value},{trials},{failed},{mean},{std}\n"));
    }
    match out {
        Some(path) => write(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    if failures == results.len() {
        return Err(Failure::Runtime(anyhow::anyhow!("every trial failed")));
    }
    Ok(())
}
