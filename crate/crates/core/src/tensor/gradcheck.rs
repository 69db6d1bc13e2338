use thiserror::Error;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("epsilon {0} outside [1e-7, 1e-4]")]
    Epsilon(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite {what} at parameter {param}, coordinate {coord}")]
    NonFinite {
        what: &'static str,
        param: usize,
        coord: usize,
    },
    #[error("non-finite loss at the unperturbed point")]
    NonFiniteLoss,
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.coordinates == 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the gradient of the scalar built by `loss` with respect to every
/// tensor in `params` against central differences with step `epsilon`.
///
/// `loss` receives the graph and one parameter handle per entry of `params`,
/// in order, and must return a one-element value.
pub fn gradient_check<L>(
    params: &[Tensor<f64>],
    epsilon: f64,
    loss: L,
) -> Result<GradCheckReport, GradCheckError>
where
    L: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(GradCheckError::Epsilon(epsilon));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<(Graph<f64>, Var), TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok((g, out))
    };

    let (graph, out) = eval(params)?;
    if !graph.value(out).item()?.is_finite() {
        return Err(GradCheckError::NonFiniteLoss);
    }
    let analytic = graph.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for (p, tensor) in params.iter().enumerate() {
        for c in 0..tensor.len() {
            let a = analytic.get(p).data()[c];
            if !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    what: "analytic gradient",
                    param: p,
                    coord: c,
                });
            }
            let original = tensor.data()[c];
            work[p].data_mut()[c] = original + epsilon;
            let (g, o) = eval(&work)?;
            let plus = g.value(o).item()?;
            work[p].data_mut()[c] = original - epsilon;
            let (g, o) = eval(&work)?;
            let minus = g.value(o).item()?;
            work[p].data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(GradCheckError::NonFinite {
                    what: "numeric gradient",
                    param: p,
                    coord: c,
                });
            }
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((p, c));
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
