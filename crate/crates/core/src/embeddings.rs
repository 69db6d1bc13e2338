//! Node-type embeddings: initialization, lookup, skip-gram pretraining and a
//! word2vec-style text format for exchanging tables.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ast::{Sample, Tree, Vocabulary};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding size must be at least 1")]
    ZeroDim,
    #[error("vocabulary of {vocab} types is too small for {negatives} negative samples")]
    TooFewTypes { vocab: usize, negatives: usize },
    #[error("need at least one sample and one negative")]
    EmptyInput,
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("file has dimension {found}, expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("duplicate token {token:?} on line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("token {0:?} contains whitespace and cannot be written")]
    BadToken(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Embedding matrix of shape `(vocab size, V)`; row 0 is the OOV row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<F = f32> {
    vocab: Vocabulary,
    matrix: Tensor<F>,
}

impl<F: Real> EmbeddingTable<F> {
    /// Entries uniform in `[-0.5/V, 0.5/V]`.
    pub fn init(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / dim as f64;
        let data = (0..vocab.len() * dim)
            .map(|_| F::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Ok(Self {
            vocab: vocab.clone(),
            matrix: Tensor::new(vec![vocab.len(), dim], data).expect("shape matches"),
        })
    }

    pub fn from_matrix(vocab: Vocabulary, matrix: Tensor<F>) -> Result<Self, TensorError> {
        if matrix.rank() != 2 || matrix.shape()[0] != vocab.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_table",
                left: vec![vocab.len()],
                right: matrix.shape().to_vec(),
            });
        }
        Ok(Self { vocab, matrix })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn matrix(&self) -> &Tensor<F> {
        &self.matrix
    }

    pub fn into_matrix(self) -> Tensor<F> {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, id: usize) -> &[F] {
        self.matrix.row(id)
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [F] {
        let dim = self.dim();
        &mut self.matrix.data_mut()[id * dim..(id + 1) * dim]
    }

    /// Node matrix `X` of shape `(T, V)`: row `i` is the embedding of node
    /// `i`'s type.
    pub fn vectorize(&self, tree: &Tree) -> Tensor<F> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(tree.len() * dim);
        for name in tree.type_names() {
            data.extend_from_slice(self.row(self.vocab.id(name)));
        }
        Tensor::new(vec![tree.len(), dim], data).expect("shape matches")
    }

    pub fn cast<G: Real>(&self) -> EmbeddingTable<G> {
        EmbeddingTable {
            vocab: self.vocab.clone(),
            matrix: self.matrix.cast(),
        }
    }

    /// Writes `<count> <V>` then one `<token> <f1> .. <fV>` line per row.
    pub fn to_text(&self) -> Result<String, EmbeddingError> {
        let mut out = format!("{} {}\n", self.vocab.len(), self.dim());
        for (id, token) in self.vocab.tokens().iter().enumerate() {
            if token.chars().any(char::is_whitespace) {
                return Err(EmbeddingError::BadToken(token.clone()));
            }
            out.push_str(token);
            for x in self.row(id) {
                write!(out, " {x}").expect("write to string");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn export_text(&self, path: &Path) -> Result<(), EmbeddingError> {
        crate::io::write_atomic(path, self.to_text()?.as_bytes())?;
        Ok(())
    }

    /// Overwrites rows of a copy of `self` with the vectors in `text`.
    /// Tokens missing from this table's vocabulary are skipped and counted.
    pub fn with_text(&self, text: &str) -> Result<(Self, ImportReport), EmbeddingError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(EmbeddingError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_usize = |s: &str| {
            s.parse::<usize>().map_err(|e| EmbeddingError::Format {
                line: 1,
                message: format!("bad header field {s:?}: {e}"),
            })
        };
        if fields.len() != 2 {
            return Err(EmbeddingError::Format {
                line: 1,
                message: format!("header must be `<count> <dim>`, got {header:?}"),
            });
        }
        let (count, dim) = (parse_usize(fields[0])?, parse_usize(fields[1])?);
        if dim != self.dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim(),
                found: dim,
            });
        }
        let mut table = self.clone();
        let mut report = ImportReport::default();
        let mut seen = HashSet::new();
        let mut rows = 0;
        for (i, line) in lines {
            let line_no = i + 1;
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-blank line");
            let values = parts
                .map(|s| {
                    s.parse::<f64>().map_err(|e| EmbeddingError::Format {
                        line: line_no,
                        message: format!("bad value {s:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != dim {
                return Err(EmbeddingError::Format {
                    line: line_no,
                    message: format!("expected {dim} values, got {}", values.len()),
                });
            }
            if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                return Err(EmbeddingError::Format {
                    line: line_no,
                    message: format!("non-finite value at column {}", bad + 1),
                });
            }
            if !seen.insert(token.to_owned()) {
                return Err(EmbeddingError::DuplicateToken {
                    token: token.to_owned(),
                    line: line_no,
                });
            }
            rows += 1;
            match self.vocab.get(token) {
                Some(id) => {
                    for (dst, v) in table.row_mut(id).iter_mut().zip(&values) {
                        *dst = F::from_f64(*v);
                    }
                    report.loaded += 1;
                }
                None => report.skipped += 1,
            }
        }
        if rows != count {
            return Err(EmbeddingError::Format {
                line: 1,
                message: format!("header declares {count} rows, file has {rows}"),
            });
        }
        Ok((table, report))
    }

    pub fn import_text(&self, path: &Path) -> Result<(Self, ImportReport), EmbeddingError> {
        self.with_text(&std::fs::read_to_string(path)?)
    }
}

/// Registers the trainable lookup `X = table[ids]` on a graph.
pub fn vectorize_var<F: Real>(
    g: &mut Graph<F>,
    table: Var,
    ids: &[usize],
) -> Result<Var, TensorError> {
    g.gather_rows(table, ids)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub loaded: usize,
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 5,
            negatives: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

/// Skip-gram model over node types: `input` is the embedding table handed
/// to the classifier, `output` the context vectors.
#[derive(Clone, Debug)]
pub struct SkipGram {
    pub input: EmbeddingTable<f32>,
    pub output: Tensor<f32>,
    /// Mean per-pair loss of each epoch, as observed during training.
    pub epoch_losses: Vec<f64>,
    noise: Vec<f64>,
}

/// `(center, context)` id pairs where the context is the parent, a child,
/// or an adjacent sibling of the center.
pub fn context_pairs(samples: &[Sample], vocab: &Vocabulary) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in samples {
        let t = &s.tree;
        let ids = vocab.encode(t);
        for n in 0..t.len() {
            if let Some(p) = t.parent(n) {
                pairs.push((ids[n], ids[p]));
                let sibs = t.children(p);
                let pos = sibs.iter().position(|&c| c == n).expect("child of parent");
                if pos > 0 {
                    pairs.push((ids[n], ids[sibs[pos - 1]]));
                }
                if pos + 1 < sibs.len() {
                    pairs.push((ids[n], ids[sibs[pos + 1]]));
                }
            }
            for &c in t.children(n) {
                pairs.push((ids[n], ids[c]));
            }
        }
    }
    pairs
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws a negative type other than `context`; falls back to a uniform
/// draw when the noise distribution is concentrated on `context`.
fn draw_negative(noise: &[f64], context: usize, rng: &mut ChaCha8Rng) -> usize {
    for _ in 0..32 {
        let u = rng.gen::<f64>();
        let n = noise.partition_point(|c| *c <= u).min(noise.len() - 1);
        if n != context {
            return n;
        }
    }
    let n = rng.gen_range(0..noise.len() - 1);
    if n >= context {
        n + 1
    } else {
        n
    }
}

impl SkipGram {
    /// Trains with negative sampling from the unigram^0.75 distribution of
    /// context types; the learning rate decays linearly over all updates.
    pub fn train(
        samples: &[Sample],
        vocab: &Vocabulary,
        cfg: &SkipGramConfig,
    ) -> Result<Self, EmbeddingError> {
        if samples.is_empty() || cfg.negatives == 0 {
            return Err(EmbeddingError::EmptyInput);
        }
        if vocab.len() < cfg.negatives + 1 {
            return Err(EmbeddingError::TooFewTypes {
                vocab: vocab.len(),
                negatives: cfg.negatives,
            });
        }
        let input = EmbeddingTable::init(vocab, cfg.dim, cfg.seed)?;
        let mut model = SkipGram {
            input,
            output: Tensor::zeros(&[vocab.len(), cfg.dim]),
            epoch_losses: Vec::with_capacity(cfg.epochs),
            noise: Vec::new(),
        };
        let mut pairs = context_pairs(samples, vocab);
        model.noise = noise_cdf(&pairs, vocab.len());
        if cfg.epochs == 0 || pairs.is_empty() {
            return Ok(model);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
        let total = (cfg.epochs * pairs.len()) as f64;
        let mut step = 0usize;
        let dim = cfg.dim;
        let mut grad_in = vec![0f64; dim];
        for _ in 0..cfg.epochs {
            pairs.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for &(center, context) in &pairs {
                let lr = cfg.learning_rate * (1.0 - step as f64 / total).max(1e-4);
                step += 1;
                grad_in.iter_mut().for_each(|g| *g = 0.0);
                let mut targets = Vec::with_capacity(cfg.negatives + 1);
                targets.push((context, 1.0));
                for _ in 0..cfg.negatives {
                    targets.push((draw_negative(&model.noise, context, &mut rng), 0.0));
                }
                for (target, label) in targets {
                    let score: f64 =
                        crate::tensor::dot(model.input.row(center), model.output.row(target))
                            .as_f64();
                    let p = sigmoid(score);
                    epoch_loss -= if label > 0.5 {
                        p.max(1e-12).ln()
                    } else {
                        (1.0 - p).max(1e-12).ln()
                    };
                    let coef = lr * (label - p);
                    let out_row = &mut model.output.data_mut()[target * dim..(target + 1) * dim];
                    for ((gi, o), x) in grad_in
                        .iter_mut()
                        .zip(out_row.iter_mut())
                        .zip(model.input.row(center))
                    {
                        *gi += coef * *o as f64;
                        *o += (coef * *x as f64) as f32;
                    }
                }
                for (x, gi) in model.input.row_mut(center).iter_mut().zip(&grad_in) {
                    *x += *gi as f32;
                }
            }
            model.epoch_losses.push(epoch_loss / pairs.len() as f64);
        }
        Ok(model)
    }

    /// Mean negative-sampling loss over `pairs` with negatives drawn from a
    /// fixed `seed`, so successive models can be compared on the same draws.
    pub fn pair_loss(&self, pairs: &[(usize, usize)], negatives: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for &(center, context) in pairs {
            let pos = sigmoid(self.score(center, context));
            total -= pos.max(1e-12).ln();
            for _ in 0..negatives {
                let n = draw_negative(&self.noise, context, &mut rng);
                total -= (1.0 - sigmoid(self.score(center, n))).max(1e-12).ln();
            }
        }
        total / pairs.len().max(1) as f64
    }

    /// Raw agreement between a center type and a context type.
    pub fn score(&self, center: usize, context: usize) -> f64 {
        crate::tensor::dot(self.input.row(center), self.output.row(context)).as_f64()
    }
}

fn noise_cdf(pairs: &[(usize, usize)], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0f64; vocab];
    for &(_, c) in pairs {
        counts[c] += 1.0;
    }
    if counts.iter().all(|c| *c == 0.0) {
        counts.iter_mut().for_each(|c| *c = 1.0);
    }
    let weights: Vec<f64> = counts.iter().map(|c| c.powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

/// Skip-gram pretraining returning only the input table.
pub fn pretrain_skipgram(
    samples: &[Sample],
    vocab: &Vocabulary,
    cfg: &SkipGramConfig,
) -> Result<EmbeddingTable<f32>, EmbeddingError> {
    Ok(SkipGram::train(samples, vocab, cfg)?.input)
}
