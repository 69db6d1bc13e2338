//! Margin-loss training, evaluation, ensembling and checkpoints.

mod checkpoint;
mod loss;
mod metrics;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use loss::{margin_loss, margin_loss_value, MarginConfig};
pub use metrics::{metrics_csv, ClassStats, EpochRecord, Evaluation};
pub use optim::{OptimError, Optimizer, OptimizerKind};

use crate::ast::{Sample, Vocabulary};
use crate::embeddings::EmbeddingTable;
use crate::model::{argmax, ModelConfig, PreparedTree, TreeCaps};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    /// Samples whose gradients are summed before one optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let margin = MarginConfig::default();
        Self {
            learning_rate: 0.001,
            lr_decay: 0.95,
            epochs: 40,
            batch_size: 32,
            seed: 0,
            m_plus: margin.m_plus,
            m_minus: margin.m_minus,
            lambda: margin.lambda,
            optimizer: OptimizerKind::Radam,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn margin(&self) -> MarginConfig {
        MarginConfig {
            m_plus: self.m_plus,
            m_minus: self.m_minus,
            lambda: self.lambda,
        }
    }

    /// Every violated constraint, joined into one message.
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            problems.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if self.epochs == 0 {
            problems.push("epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if let Err(e) = self.margin().validate() {
            problems.push(e);
        }
        if let Err(e) = self.model.validate() {
            problems.push(e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("sample {index} has label {label} but there are {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("non-finite loss or gradient at epoch {epoch}, training sample {sample}")]
    NonFinite { epoch: usize, sample: usize },
    #[error("incompatible models: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn check_labels(samples: &[Sample], classes: usize) -> Result<(), TrainError> {
    match samples.iter().position(|s| s.label >= classes) {
        Some(index) => Err(TrainError::Label {
            index,
            label: samples[index].label,
            classes,
        }),
        None => Ok(()),
    }
}

pub fn train(
    train_set: &[Sample],
    validation: &[Sample],
    vocab: &Vocabulary,
    class_names: &[String],
    cfg: &TrainConfig,
    init_embeddings: Option<&EmbeddingTable<f32>>,
) -> Result<TrainOutcome, TrainError> {
    train_with(
        train_set,
        validation,
        vocab,
        class_names,
        cfg,
        init_embeddings,
        |_| {},
    )
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    train_set: &[Sample],
    validation: &[Sample],
    vocab: &Vocabulary,
    class_names: &[String],
    cfg: &TrainConfig,
    init_embeddings: Option<&EmbeddingTable<f32>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("training"));
    }
    if validation.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let classes = class_names.len();
    check_labels(train_set, classes)?;
    check_labels(validation, classes)?;

    let mut model = TreeCaps::<f32>::new(cfg.model.clone(), vocab.clone(), classes, cfg.seed)
        .map_err(TrainError::Config)?;
    if let Some(table) = init_embeddings {
        model.set_embeddings(table).map_err(TrainError::Config)?;
    }
    let prepared: Vec<PreparedTree<f32>> =
        train_set.iter().map(|s| model.prepare(&s.tree)).collect();
    let val_prepared: Vec<PreparedTree<f32>> =
        validation.iter().map(|s| model.prepare(&s.tree)).collect();
    let val_labels: Vec<usize> = validation.iter().map(|s| s.label).collect();
    let margin = cfg.margin();
    // a frozen embedding table is not registered as a parameter
    let skip = usize::from(!cfg.model.train_embeddings);

    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, TreeCaps<f32>)> = None;
    let mut lr = cfg.learning_rate;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &i in batch {
                let mut g = Graph::new();
                let out = model.forward(&mut g, &prepared[i])?;
                let loss = margin_loss(&mut g, out.norms, train_set[i].label, &margin)?;
                let value = g.value(loss).item()?;
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { epoch, sample: i });
                }
                loss_sum += f64::from(value);
                let grads = g.backward(loss)?.into_vec();
                if grads.iter().any(|t| !t.all_finite()) {
                    return Err(TrainError::NonFinite { epoch, sample: i });
                }
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += *y;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f32;
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            optimizer.step(model.tensors_mut().skip(skip), &grads, lr)?;
        }
        lr *= cfg.lr_decay;

        let val_accuracy = accuracy(&model, &val_prepared, &val_labels)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, model.clone()));
        }
    }

    let (val_accuracy, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            class_names: class_names.to_vec(),
            validation_accuracy: Some(val_accuracy),
            train: Some(cfg.clone()),
        },
        history,
        best_epoch,
    })
}

fn accuracy(
    model: &TreeCaps<f32>,
    trees: &[PreparedTree<f32>],
    labels: &[usize],
) -> Result<f64, TensorError> {
    let correct = trees
        .par_iter()
        .zip(labels)
        .map(|(t, l)| {
            model
                .predict_prepared(t)
                .map(|p| usize::from(p.class == *l))
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / trees.len() as f64)
}

/// Accuracy, per-class statistics and confusion matrix of one model.
pub fn evaluate(
    model: &TreeCaps<f32>,
    samples: &[Sample],
    class_names: &[String],
) -> Result<Evaluation, TrainError> {
    let classes = model.num_classes();
    if class_names.len() != classes {
        return Err(TrainError::Incompatible(format!(
            "model has {classes} classes, dataset manifest has {}",
            class_names.len()
        )));
    }
    check_labels(samples, classes)?;
    let preds = samples
        .par_iter()
        .map(|s| model.predict(&s.tree).map(|p| p.class))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Evaluation::from_pairs(
        samples.iter().map(|s| s.label).zip(preds),
        classes,
        class_names,
    ))
}

/// Weighted average of per-model class probabilities.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<Checkpoint>,
    weights: Vec<f64>,
}

impl Ensemble {
    /// `weights` default to each member's validation accuracy. Weights are
    /// normalized to sum to one.
    pub fn new(members: Vec<Checkpoint>, weights: Option<Vec<f64>>) -> Result<Self, TrainError> {
        let first = members.first().ok_or_else(|| {
            TrainError::Incompatible("an ensemble needs at least one model".into())
        })?;
        for (i, m) in members.iter().enumerate().skip(1) {
            if m.class_names != first.class_names {
                return Err(TrainError::Incompatible(format!(
                    "model {i} has different classes than model 0"
                )));
            }
            if m.model.vocab() != first.model.vocab() {
                return Err(TrainError::Incompatible(format!(
                    "model {i} has a different vocabulary than model 0"
                )));
            }
        }
        let weights = match weights {
            Some(w) => w,
            None => members
                .iter()
                .map(|m| m.validation_accuracy.unwrap_or(1.0))
                .collect(),
        };
        if weights.len() != members.len() {
            return Err(TrainError::Incompatible(format!(
                "{} weights for {} models",
                weights.len(),
                members.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::Incompatible(format!(
                "weights must be non-negative, got {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(TrainError::Incompatible("weights sum to zero".into()));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            members,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn members(&self) -> &[Checkpoint] {
        &self.members
    }

    pub fn class_names(&self) -> &[String] {
        &self.members[0].class_names
    }

    pub fn probabilities(&self, tree: &crate::ast::Tree) -> Result<Vec<f64>, TensorError> {
        let mut out = vec![0.0; self.class_names().len()];
        for (m, w) in self.members.iter().zip(&self.weights) {
            let p = m.model.predict(tree)?;
            for (o, q) in out.iter_mut().zip(&p.probabilities) {
                *o += w * q;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, tree: &crate::ast::Tree) -> Result<usize, TensorError> {
        Ok(argmax(&self.probabilities(tree)?))
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<Evaluation, TrainError> {
        let classes = self.class_names().len();
        check_labels(samples, classes)?;
        let preds = samples
            .par_iter()
            .map(|s| self.predict(&s.tree))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Evaluation::from_pairs(
            samples.iter().map(|s| s.label).zip(preds),
            classes,
            self.class_names(),
        ))
    }
}
