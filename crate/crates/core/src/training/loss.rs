use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got m_minus={} m_plus={}",
                self.m_minus, self.m_plus
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

/// Sum over classes of
/// `T max(0, m+ - |v|)^2 + lambda (1 - T) max(0, |v| - m-)^2`.
pub fn margin_loss_value(norms: &[f64], label: usize, cfg: &MarginConfig) -> f64 {
    norms
        .iter()
        .enumerate()
        .map(|(m, n)| {
            if m == label {
                (cfg.m_plus - n).max(0.0).powi(2)
            } else {
                cfg.lambda * (n - cfg.m_minus).max(0.0).powi(2)
            }
        })
        .sum()
}

/// Graph form of [`margin_loss_value`] for a `[κ]` vector of norms.
pub fn margin_loss<F: Real>(
    g: &mut Graph<F>,
    norms: Var,
    label: usize,
    cfg: &MarginConfig,
) -> Result<Var, TensorError> {
    let k = g.shape(norms).iter().product::<usize>();
    if label >= k {
        return Err(TensorError::IndexOutOfRange {
            op: "margin_loss",
            index: label,
            extent: k,
        });
    }
    let mut target = vec![F::zero(); k];
    target[label] = F::one();
    let target = g.constant(Tensor::vector(target));
    let mut other = vec![F::from_f64(cfg.lambda); k];
    other[label] = F::zero();
    let other = g.constant(Tensor::vector(other));

    let neg = g.scale(norms, -F::one());
    let pos_gap = g.add_scalar(neg, F::from_f64(cfg.m_plus));
    let pos_gap = g.relu(pos_gap);
    let pos = g.square(pos_gap);
    let pos = g.mul(pos, target)?;

    let neg_gap = g.add_scalar(norms, F::from_f64(-cfg.m_minus));
    let neg_gap = g.relu(neg_gap);
    let neg = g.square(neg_gap);
    let neg = g.mul(neg, other)?;

    let total = g.add(pos, neg)?;
    Ok(g.sum(total))
}
