//! End-to-end gradient check of the full model.

use rand::Rng;
use treecaps::capsules::RoutingConfig;
use treecaps::model::{ModelConfig, TreeCaps, Variant};
use treecaps::tensor::gradient_check;
use treecaps::training::{margin_loss, MarginConfig};
use treecaps::{Tensor, Vocabulary};

fn small_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        embed_dim: 6,
        conv_dim: 4,
        slices: 2,
        primary_dim: 4,
        routing: RoutingConfig {
            static_caps: 3,
            routed_caps: None,
            static_iters: 3,
            dynamic_iters: 3,
        },
        code_dim: 4,
        variant,
        secondary_caps: 2,
        secondary_dim: 3,
        ..ModelConfig::default()
    }
}

/// Relative error of the full forward pass plus margin loss, with unit-scale
/// random parameters.
pub fn model_gradient_error(variant: Variant, seed: u64, epsilon: f64) -> f64 {
    let mut rng = super::rng(seed);
    let nodes = rng.gen_range(8..=15);
    let tree = super::random_tree(&mut rng, nodes, 5);
    let vocab = Vocabulary::from_trees([&tree]);
    let model = TreeCaps::<f64>::new(small_config(variant), vocab, 3, seed).unwrap();
    let params: Vec<Tensor<f64>> = model
        .tensors()
        .iter()
        .map(|t| {
            let n = t.shape().iter().product();
            Tensor::new(
                t.shape().to_vec(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    let prepared = model.prepare(&tree);
    let label = rng.gen_range(0..3);
    let report = gradient_check(&params, epsilon, |g, v| {
        let out = model.forward_with(g, v, &prepared)?;
        margin_loss(g, out.norms, label, &MarginConfig::default())
    })
    .unwrap();
    report.max_rel_error
}
