//! Capsule layers: squash, primary variable capsules, variable-to-static
//! routing, prediction vectors, dynamic routing and the ablation variants.
//!
//! All layers operate on a [`Graph`] so that gradients flow through every
//! routing iteration, including the routing coefficients. Top-norm
//! selection is treated as a fixed gather.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub const SQUASH_EPS: f64 = 1e-9;

/// `(|u|^2 / (1 + |u|^2)) * u / (|u| + 1e-9)`
pub fn squash<F: Real>(u: &[F]) -> Vec<F> {
    let n2: F = u.iter().map(|x| *x * *x).sum();
    let n = n2.sqrt();
    let factor = n2 / ((F::one() + n2) * (n + F::from_f64(SQUASH_EPS)));
    u.iter().map(|x| *x * factor).collect()
}

/// Squash along the last axis of `s`.
pub fn squash_var<F: Real>(g: &mut Graph<F>, s: Var) -> Result<Var, TensorError> {
    let n = g.norm_last(s)?;
    let n2 = g.square(n);
    let one_plus = g.add_scalar(n2, F::one());
    let shifted = g.add_scalar(n, F::from_f64(SQUASH_EPS));
    let denom = g.mul(one_plus, shifted)?;
    let factor = g.div(n2, denom)?;
    g.scale_last(s, factor)
}

/// Groups per-node conv features `[T, F]` into `[T * F / D, D]` capsules
/// (node-major; a capsule never spans two nodes) and squashes each one.
pub fn primary_capsules<F: Real>(
    g: &mut Graph<F>,
    features: Var,
    dim: usize,
) -> Result<Var, TensorError> {
    let shape = g.shape(features).to_vec();
    let [nodes, width] = shape[..] else {
        return Err(TensorError::InvalidShape {
            op: "primary_capsules",
            shape,
        });
    };
    if dim == 0 || width % dim != 0 {
        return Err(TensorError::InvalidShape {
            op: "primary_capsules: per-node width must be a multiple of the capsule size",
            shape: vec![width, dim],
        });
    }
    let caps = g.reshape(features, &[nodes * width / dim, dim])?;
    squash_var(g, caps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    /// Static capsules produced (`a`).
    pub static_caps: usize,
    /// Highest-norm inputs routed (`b`); `None` routes every input.
    pub routed_caps: Option<usize>,
    /// Variable-to-static iterations (`r`).
    pub static_iters: usize,
    /// Dynamic routing iterations (`t`).
    pub dynamic_iters: usize,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            static_caps: 8,
            routed_caps: None,
            static_iters: 3,
            dynamic_iters: 3,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.static_caps == 0 {
            problems.push("static_caps must be at least 1".to_string());
        }
        if let Some(b) = self.routed_caps {
            if b < self.static_caps {
                problems.push(format!(
                    "routed_caps ({b}) must be at least static_caps ({})",
                    self.static_caps
                ));
            }
        }
        if self.static_iters == 0 {
            problems.push("static_iters must be at least 1".to_string());
        }
        if self.dynamic_iters == 0 {
            problems.push("dynamic_iters must be at least 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// Input indices ordered by descending L2 norm; ties keep input order.
pub fn norm_order<F: Real>(caps: &Tensor<F>) -> Vec<usize> {
    let norms: Vec<F> = caps.rows().map(crate::tensor::l2).collect();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

pub struct StaticRouting {
    /// `[a, D]`
    pub output: Var,
    /// Coupling coefficients `[b, a]` after each iteration's softmax.
    pub coupling: Vec<Var>,
    /// Input rows used to initialize the outputs, highest norm first.
    /// Indices past the input count refer to zero padding.
    pub init: Vec<usize>,
}

/// Routes a variable number of capsules `[N, D]` to `a` static capsules.
///
/// Outputs start as the `a` highest-norm inputs; each iteration adds the
/// dot-product agreement of the top-`b` inputs with the outputs to the
/// routing logits, normalizes them over outputs, and recomputes every
/// output as the squashed coupling-weighted sum of the routed inputs.
pub fn variable_to_static<F: Real>(
    g: &mut Graph<F>,
    caps: Var,
    cfg: &RoutingConfig,
) -> Result<StaticRouting, TensorError> {
    let shape = g.shape(caps).to_vec();
    let [n, dim] = shape[..] else {
        return Err(TensorError::InvalidShape {
            op: "variable_to_static",
            shape,
        });
    };
    let a = cfg.static_caps;
    let caps = if n < a {
        let pad = g.constant(Tensor::zeros(&[a - n, dim]));
        g.concat(&[caps, pad], 0)?
    } else {
        caps
    };
    let n = n.max(a);
    let b = cfg.routed_caps.unwrap_or(n).min(n).max(a);
    let order = norm_order(g.value(caps));

    let routed = g.gather_rows(caps, &order[..b])?;
    let mut out = g.gather_rows(caps, &order[..a])?;
    let mut logits = g.constant(Tensor::zeros(&[b, a]));
    let mut coupling = Vec::with_capacity(cfg.static_iters);
    for _ in 0..cfg.static_iters {
        let out_t = g.transpose(out)?;
        let agreement = g.matmul(routed, out_t)?;
        logits = g.add(logits, agreement)?;
        let beta = g.softmax(logits, 1)?;
        coupling.push(beta);
        let beta_t = g.transpose(beta)?;
        let s = g.matmul(beta_t, routed)?;
        out = squash_var(g, s)?;
    }
    Ok(StaticRouting {
        output: out,
        coupling,
        init: order[..a].to_vec(),
    })
}

/// Prediction vectors `v_hat[j, m] = W[j, m] v[j]` for `v: [a, D_in]` and
/// `W: [a, M, D_out, D_in]`; returns `[a, M, D_out]`.
pub fn predict_vectors<F: Real>(g: &mut Graph<F>, v: Var, w: Var) -> Result<Var, TensorError> {
    let (vs, ws) = (g.shape(v).to_vec(), g.shape(w).to_vec());
    let (&[a, d_in], &[wa, m, d_out, wd]) = (&vs[..], &ws[..]) else {
        return Err(TensorError::ShapeMismatch {
            op: "predict_vectors",
            left: vs,
            right: ws,
        });
    };
    if a != wa || d_in != wd {
        return Err(TensorError::ShapeMismatch {
            op: "predict_vectors",
            left: vs,
            right: ws,
        });
    }
    let mut rows = Vec::with_capacity(a);
    for j in 0..a {
        let wj = g.slice(w, 0, j, 1)?;
        let wj = g.reshape(wj, &[m * d_out, d_in])?;
        let vj = g.slice(v, 0, j, 1)?;
        let vj = g.reshape(vj, &[d_in])?;
        rows.push(g.matvec(wj, vj)?);
    }
    let flat = g.concat(&rows, 0)?;
    g.reshape(flat, &[a, m, d_out])
}

pub struct DynamicRouting {
    /// `[M, D]`
    pub output: Var,
    /// Coupling coefficients `[a, M]` of each iteration.
    pub coupling: Vec<Var>,
}

/// Dynamic routing of prediction vectors `[a, M, D]` to `M` capsules.
pub fn dynamic_route<F: Real>(
    g: &mut Graph<F>,
    predictions: Var,
    iters: usize,
) -> Result<DynamicRouting, TensorError> {
    let shape = g.shape(predictions).to_vec();
    let [a, m, _] = shape[..] else {
        return Err(TensorError::InvalidShape {
            op: "dynamic_route",
            shape,
        });
    };
    if iters == 0 {
        return Err(TensorError::InvalidShape {
            op: "dynamic_route: needs at least one iteration",
            shape,
        });
    }
    let mut logits = g.constant(Tensor::zeros(&[a, m]));
    let mut coupling = Vec::with_capacity(iters);
    let mut out = None;
    for it in 0..iters {
        let gamma = g.softmax(logits, 1)?;
        coupling.push(gamma);
        let weighted = g.scale_last(predictions, gamma)?;
        let s = g.sum_axis(weighted, 0)?;
        let z = squash_var(g, s)?;
        out = Some(z);
        if it + 1 < iters {
            // the final agreement update cannot affect the output
            let zr = g.repeat(z, a);
            let prod = g.mul(predictions, zr)?;
            let agreement = g.sum_axis(prod, 2)?;
            logits = g.add(logits, agreement)?;
        }
    }
    Ok(DynamicRouting {
        output: out.expect("at least one iteration"),
        coupling,
    })
}

/// An extra capsule layer between the static and code capsules: its own
/// transform `[a, a_sc, D_sc, D]` followed by dynamic routing.
pub fn secondary_layer<F: Real>(
    g: &mut Graph<F>,
    v: Var,
    w: Var,
    iters: usize,
) -> Result<Var, TensorError> {
    let predictions = predict_vectors(g, v, w)?;
    Ok(dynamic_route(g, predictions, iters)?.output)
}

/// Uniform entries in `±sqrt(6 / (D_in + D_out))` for a transform of shape
/// `[inputs, outputs, D_out, D_in]`.
pub fn init_transform<F: Real>(
    inputs: usize,
    outputs: usize,
    d_out: usize,
    d_in: usize,
    seed: u64,
) -> Tensor<F> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..inputs * outputs * d_out * d_in)
        .map(|_| F::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(vec![inputs, outputs, d_out, d_in], data).expect("shape matches")
}

/// Capsule lengths and their softmax.
pub fn class_scores<F: Real>(g: &mut Graph<F>, caps: Var) -> Result<(Var, Var), TensorError> {
    let norms = g.norm_last(caps)?;
    let probs = g.softmax(norms, 0)?;
    Ok((norms, probs))
}

/// Coordinate-wise maximum over all capsules, as a single `[1, D]` capsule.
pub fn dynamic_max_pool<F: Real>(g: &mut Graph<F>, caps: Var) -> Result<Var, TensorError> {
    let pooled = g.max_axis0(caps)?;
    let d = g.shape(pooled).to_vec();
    let mut shape = vec![1];
    shape.extend(d);
    g.reshape(pooled, &shape)
}
