//! The assembled classifier and its named parameter store.

use serde::{Deserialize, Serialize};

use crate::ast::{Tree, Vocabulary};
use crate::capsules::{self, RoutingConfig};
use crate::conv::{self, ConvStack, ConvVars, WindowMix};
use crate::embeddings::EmbeddingTable;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Variable-to-static routing into the code capsules.
    #[default]
    Standard,
    /// All primary capsules max-pooled into one before the code capsules.
    DmpAblation,
    /// An extra dynamically routed layer between static and code capsules.
    SecondaryLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Convolution window depth `d`.
    pub window_depth: usize,
    /// Node embedding size `V`.
    pub embed_dim: usize,
    /// Features per slice `V'`.
    pub conv_dim: usize,
    /// Convolution slices `ε`.
    pub slices: usize,
    /// Primary capsule size `D_pvc`.
    pub primary_dim: usize,
    pub routing: RoutingConfig,
    /// Code capsule size `D_cc`.
    pub code_dim: usize,
    pub variant: Variant,
    /// Secondary capsule count `a_sc`, used by [`Variant::SecondaryLayer`].
    pub secondary_caps: usize,
    /// Secondary capsule size `D_sc`.
    pub secondary_dim: usize,
    /// Update the embedding table during training.
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window_depth: 2,
            embed_dim: 32,
            conv_dim: 32,
            slices: 8,
            primary_dim: 8,
            routing: RoutingConfig::default(),
            code_dim: 8,
            variant: Variant::Standard,
            secondary_caps: 8,
            secondary_dim: 8,
            train_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, joined into one message.
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("window_depth", self.window_depth),
            ("embed_dim", self.embed_dim),
            ("conv_dim", self.conv_dim),
            ("slices", self.slices),
            ("primary_dim", self.primary_dim),
            ("code_dim", self.code_dim),
            ("secondary_caps", self.secondary_caps),
            ("secondary_dim", self.secondary_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        let width = self.conv_dim * self.slices;
        if self.primary_dim != 0 && !width.is_multiple_of(self.primary_dim) {
            problems.push(format!(
                "conv_dim * slices ({width}) must be divisible by primary_dim ({})",
                self.primary_dim
            ));
        }
        if let Err(e) = self.routing.validate() {
            problems.push(e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    /// Shape of the transform feeding the code capsules.
    fn code_transform_shape(&self, classes: usize) -> [usize; 4] {
        match self.variant {
            Variant::Standard => [
                self.routing.static_caps,
                classes,
                self.code_dim,
                self.primary_dim,
            ],
            Variant::DmpAblation => [1, classes, self.code_dim, self.primary_dim],
            Variant::SecondaryLayer => [
                self.secondary_caps,
                classes,
                self.code_dim,
                self.secondary_dim,
            ],
        }
    }

    /// Names and shapes of every parameter, in registration order.
    pub fn param_shapes(&self, vocab_len: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
        let (e, o, i) = (self.slices, self.conv_dim, self.embed_dim);
        let mut out = vec![
            ("embedding".to_string(), vec![vocab_len, i]),
            ("conv.w_top".to_string(), vec![e, o, i]),
            ("conv.w_left".to_string(), vec![e, o, i]),
            ("conv.w_right".to_string(), vec![e, o, i]),
            ("conv.bias".to_string(), vec![e, o]),
        ];
        if self.variant == Variant::SecondaryLayer {
            out.push((
                "secondary.transform".to_string(),
                vec![
                    self.routing.static_caps,
                    self.secondary_caps,
                    self.secondary_dim,
                    self.primary_dim,
                ],
            ));
        }
        out.push((
            "code.transform".to_string(),
            self.code_transform_shape(classes).to_vec(),
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// A tree ready for the forward pass: vocabulary ids and window mixtures.
#[derive(Clone, Debug)]
pub struct PreparedTree<F> {
    pub ids: Vec<usize>,
    pub mix: WindowMix<F>,
}

/// Values produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[κ, D_cc]`
    pub code_caps: Var,
    /// `[κ]`
    pub norms: Var,
    /// `[κ]`
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub norms: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeCaps<F = f32> {
    config: ModelConfig,
    vocab: Vocabulary,
    classes: usize,
    params: Vec<NamedTensor<F>>,
}

impl<F: Real> TreeCaps<F> {
    /// Fresh parameters; embeddings uniform in `±0.5 / V`.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        classes: usize,
        seed: u64,
    ) -> Result<Self, String> {
        config.validate()?;
        if classes == 0 {
            return Err("at least one class is required".to_string());
        }
        let table =
            EmbeddingTable::<F>::init(&vocab, config.embed_dim, seed).map_err(|e| e.to_string())?;
        let stack = ConvStack::<F>::init(
            config.embed_dim,
            config.conv_dim,
            config.slices,
            seed.wrapping_add(1),
        );
        let mut params = vec![
            ("embedding", table.into_matrix()),
            ("conv.w_top", stack.w_top),
            ("conv.w_left", stack.w_left),
            ("conv.w_right", stack.w_right),
            ("conv.bias", stack.bias),
        ];
        if config.variant == Variant::SecondaryLayer {
            let w = capsules::init_transform(
                config.routing.static_caps,
                config.secondary_caps,
                config.secondary_dim,
                config.primary_dim,
                seed.wrapping_add(2),
            );
            params.push(("secondary.transform", w));
        }
        let [j, m, d_out, d_in] = config.code_transform_shape(classes);
        params.push((
            "code.transform",
            capsules::init_transform(j, m, d_out, d_in, seed.wrapping_add(3)),
        ));
        let params = params
            .into_iter()
            .map(|(name, tensor)| NamedTensor {
                name: name.to_string(),
                tensor,
            })
            .collect();
        Ok(Self {
            config,
            vocab,
            classes,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        vocab: Vocabulary,
        classes: usize,
        params: Vec<NamedTensor<F>>,
    ) -> Result<Self, String> {
        config.validate()?;
        let expected = config.param_shapes(vocab.len(), classes);
        if expected.len() != params.len() {
            return Err(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            ));
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name {
                return Err(format!("expected tensor {name}, found {}", p.name));
            }
            if shape[..] != *p.tensor.shape() {
                return Err(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    p.tensor.shape()
                ));
            }
        }
        Ok(Self {
            config,
            vocab,
            classes,
            params,
        })
    }

    /// Replaces the embedding table (for example with pretrained vectors).
    pub fn set_embeddings(&mut self, table: &EmbeddingTable<F>) -> Result<(), String> {
        if table.vocab() != &self.vocab {
            return Err("embedding vocabulary differs from the model vocabulary".to_string());
        }
        if table.dim() != self.config.embed_dim {
            return Err(format!(
                "embedding dimension {} differs from embed_dim {}",
                table.dim(),
                self.config.embed_dim
            ));
        }
        self.params[0].tensor = table.matrix().clone();
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[NamedTensor<F>] {
        &self.params
    }

    pub fn tensors(&self) -> Vec<Tensor<F>> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn cast<G: Real>(&self) -> TreeCaps<G> {
        TreeCaps {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            classes: self.classes,
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn prepare(&self, tree: &Tree) -> PreparedTree<F> {
        PreparedTree {
            ids: self.vocab.encode(tree),
            mix: WindowMix::new(tree, self.config.window_depth),
        }
    }

    /// Registers every parameter on `g` (in store order) and runs the
    /// forward pass. A frozen embedding table is registered as a constant.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        tree: &PreparedTree<F>,
    ) -> Result<Forward, TensorError> {
        let vars: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 0 && !self.config.train_embeddings {
                    g.constant(p.tensor.clone())
                } else {
                    g.param(p.tensor.clone())
                }
            })
            .collect();
        self.forward_with(g, &vars, tree)
    }

    /// Forward pass with parameters already on the graph, in store order.
    pub fn forward_with(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        tree: &PreparedTree<F>,
    ) -> Result<Forward, TensorError> {
        let cfg = &self.config;
        let x = g.gather_rows(vars[0], &tree.ids)?;
        let conv = ConvVars {
            w_top: vars[1],
            w_left: vars[2],
            w_right: vars[3],
            bias: vars[4],
        };
        let features = conv::conv_tree_var(g, x, &tree.mix, &conv)?;
        let primary = capsules::primary_capsules(g, features, cfg.primary_dim)?;
        let code_in = match cfg.variant {
            Variant::Standard => capsules::variable_to_static(g, primary, &cfg.routing)?.output,
            Variant::DmpAblation => capsules::dynamic_max_pool(g, primary)?,
            Variant::SecondaryLayer => {
                let v = capsules::variable_to_static(g, primary, &cfg.routing)?.output;
                capsules::secondary_layer(g, v, vars[5], cfg.routing.dynamic_iters)?
            }
        };
        let w = *vars.last().expect("code transform");
        let predictions = capsules::predict_vectors(g, code_in, w)?;
        let code_caps = capsules::dynamic_route(g, predictions, cfg.routing.dynamic_iters)?.output;
        let (norms, probs) = capsules::class_scores(g, code_caps)?;
        Ok(Forward {
            code_caps,
            norms,
            probs,
        })
    }

    pub fn predict_prepared(&self, tree: &PreparedTree<F>) -> Result<Prediction, TensorError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tree)?;
        let norms: Vec<f64> = g
            .value(out.norms)
            .data()
            .iter()
            .map(|x| x.as_f64())
            .collect();
        let probabilities = g
            .value(out.probs)
            .data()
            .iter()
            .map(|x| x.as_f64())
            .collect();
        Ok(Prediction {
            class: argmax(&norms),
            norms,
            probabilities,
        })
    }

    pub fn predict(&self, tree: &Tree) -> Result<Prediction, TensorError> {
        self.predict_prepared(&self.prepare(tree))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
