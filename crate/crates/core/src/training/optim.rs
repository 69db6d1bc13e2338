use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adaptive moments with variance rectification.
    #[default]
    Radam,
    /// Plain adaptive moments.
    Adam,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("gradient for parameter {param} is non-finite at coordinate {coord}")]
    NonFinite { param: usize, coord: usize },
    #[error("expected {expected} gradients, got {got}")]
    Count { expected: usize, got: usize },
    #[error("gradient {param} has shape {got:?}, parameter has {expected:?}")]
    Shape {
        param: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Moment accumulators and step count. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Nothing is modified if any gradient
    /// is non-finite or mis-shaped.
    pub fn step<'a, F: Real>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<F>>,
        grads: &[Tensor<F>],
        lr: f64,
    ) -> Result<(), OptimError> {
        let params: Vec<&mut Tensor<F>> = params.into_iter().collect();
        if params.len() != grads.len() {
            return Err(OptimError::Count {
                expected: params.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    param: i,
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if let Some(c) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFinite { param: i, coord: c });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powf(t);
        let bias2 = 1.0 - b2.powf(t);
        // None: un-rectified momentum step
        let scale = match self.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::Radam => {
                let rho_inf = 2.0 / (1.0 - b2) - 1.0;
                let rho_t = rho_inf - 2.0 * t * b2.powf(t) / bias2;
                (rho_t > 4.0).then(|| {
                    (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                        .sqrt()
                })
            }
        };
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gk = gk.as_f64();
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / bias1;
                let delta = match scale {
                    Some(r) => r * m_hat / ((v[k] / bias2).sqrt() + self.eps),
                    None => m_hat,
                };
                *w = F::from_f64(w.as_f64() - lr * delta);
            }
        }
        Ok(())
    }
}
