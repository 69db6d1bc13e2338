//! Continuous-binary-tree convolution.
//!
//! Each window member's weight matrix is a blend of three shared matrices,
//! `eta_top * W_top + eta_left * W_left + eta_right * W_right`, with the
//! blend determined by the member's depth and sibling position. Because the
//! blend is linear, the per-window sums are applied to the node embeddings
//! first (as three sparse row mixtures shared by all slices) and the slice
//! weights afterwards.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{extract_windows, Tree, Window, WindowMember};
use crate::tensor::{Graph, Real, SparseRows, Tensor, TensorError, Var};

/// Blend coefficients of one window member; they sum to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eta {
    pub top: f64,
    pub left: f64,
    pub right: f64,
}

/// Coefficients for a member of a window of depth `window_depth`.
///
/// `top = (d_i - 1) / (d - 1)` with bottom-up depth, so the window root gets
/// `top = 1`. The remainder is split between left and right by the sibling
/// position `rho = (p - 1) / (k - 1)`. A depth-1 window has `top = 1`; an
/// only child has `rho = 1/2`.
pub fn eta(member: &WindowMember, window_depth: usize) -> Eta {
    let top = if window_depth <= 1 {
        1.0
    } else {
        (member.depth as f64 - 1.0) / (window_depth as f64 - 1.0)
    };
    let rho = if member.siblings <= 1 {
        0.5
    } else {
        (member.position as f64 - 1.0) / (member.siblings as f64 - 1.0)
    };
    Eta {
        top,
        left: (1.0 - top) * (1.0 - rho),
        right: (1.0 - top) * rho,
    }
}

/// One convolution slice: three `(V', V)` matrices and a bias of length `V'`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSlice<F> {
    pub w_top: Tensor<F>,
    pub w_left: Tensor<F>,
    pub w_right: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> ConvSlice<F> {
    pub fn out_dim(&self) -> usize {
        self.w_top.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w_top.shape()[1]
    }
}

/// `ε` independently initialized slices, stored stacked:
/// weights `(ε, V', V)` and biases `(ε, V')`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack<F> {
    pub w_top: Tensor<F>,
    pub w_left: Tensor<F>,
    pub w_right: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> ConvStack<F> {
    /// Weights uniform in `±sqrt(6 / (V + V'))`, zero biases.
    pub fn init(in_dim: usize, out_dim: usize, slices: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let shape = [slices, out_dim, in_dim];
        let mut draw = || {
            let data = (0..slices * out_dim * in_dim)
                .map(|_| F::from_f64(rng.gen_range(-bound..=bound)))
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches")
        };
        let (w_top, w_left, w_right) = (draw(), draw(), draw());
        Self {
            w_top,
            w_left,
            w_right,
            bias: Tensor::zeros(&[slices, out_dim]),
        }
    }

    pub fn from_slices(slices: &[ConvSlice<F>]) -> Result<Self, TensorError> {
        let first = slices
            .first()
            .ok_or(TensorError::Empty { op: "conv_stack" })?;
        let (out_dim, in_dim) = (first.out_dim(), first.in_dim());
        let stack = |pick: fn(&ConvSlice<F>) -> &Tensor<F>, shape: Vec<usize>| {
            let mut data = Vec::new();
            for s in slices {
                let t = pick(s);
                let expected: &[usize] = &shape[1..];
                if t.shape() != expected {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv_stack",
                        left: expected.to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                data.extend_from_slice(t.data());
            }
            Tensor::new(shape, data)
        };
        let n = slices.len();
        Ok(Self {
            w_top: stack(|s| &s.w_top, vec![n, out_dim, in_dim])?,
            w_left: stack(|s| &s.w_left, vec![n, out_dim, in_dim])?,
            w_right: stack(|s| &s.w_right, vec![n, out_dim, in_dim])?,
            bias: stack(|s| &s.bias, vec![n, out_dim])?,
        })
    }

    pub fn slices(&self) -> usize {
        self.w_top.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w_top.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w_top.shape()[2]
    }

    pub fn slice(&self, e: usize) -> ConvSlice<F> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let take = |t: &Tensor<F>, len: usize, shape: Vec<usize>| {
            Tensor::new(shape, t.data()[e * len..(e + 1) * len].to_vec()).expect("shape matches")
        };
        ConvSlice {
            w_top: take(&self.w_top, o * i, vec![o, i]),
            w_left: take(&self.w_left, o * i, vec![o, i]),
            w_right: take(&self.w_right, o * i, vec![o, i]),
            bias: take(&self.bias, o, vec![o]),
        }
    }

    /// Handles for the four stacked tensors registered as parameters.
    pub fn register(&self, g: &mut Graph<F>) -> ConvVars {
        ConvVars {
            w_top: g.param(self.w_top.clone()),
            w_left: g.param(self.w_left.clone()),
            w_right: g.param(self.w_right.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w_top: Var,
    pub w_left: Var,
    pub w_right: Var,
    pub bias: Var,
}

/// The three per-tree row mixtures: row `t` of `top` holds
/// `(member, eta_top)` for every member of the window rooted at `t`.
#[derive(Clone, Debug)]
pub struct WindowMix<F> {
    pub top: Arc<SparseRows<F>>,
    pub left: Arc<SparseRows<F>>,
    pub right: Arc<SparseRows<F>>,
}

impl<F: Real> WindowMix<F> {
    pub fn new(tree: &Tree, window_depth: usize) -> Self {
        Self::from_windows(&extract_windows(tree, window_depth), tree.len())
    }

    pub fn from_windows(windows: &[Window], nodes: usize) -> Self {
        let mut top = Vec::with_capacity(windows.len());
        let mut left = Vec::with_capacity(windows.len());
        let mut right = Vec::with_capacity(windows.len());
        for w in windows {
            let (mut t, mut l, mut r) = (Vec::new(), Vec::new(), Vec::new());
            for m in &w.members {
                let e = eta(m, w.window_depth);
                for (row, coef) in [(&mut t, e.top), (&mut l, e.left), (&mut r, e.right)] {
                    if coef != 0.0 {
                        row.push((m.node, F::from_f64(coef)));
                    }
                }
            }
            top.push(t);
            left.push(l);
            right.push(r);
        }
        let wrap = |rows| Arc::new(SparseRows::new(rows, nodes).expect("members index the tree"));
        Self {
            top: wrap(top),
            left: wrap(left),
            right: wrap(right),
        }
    }
}

/// Convolution of node matrix `x` (`[T, V]`) over every window with all
/// slices at once. Returns `[T, ε * V']`, each row holding slice 0's
/// features, then slice 1's, and so on.
pub fn conv_tree_var<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    mix: &WindowMix<F>,
    conv: &ConvVars,
) -> Result<Var, TensorError> {
    let nodes = g.shape(x)[0];
    let w_shape = g.shape(conv.w_top).to_vec();
    let [slices, out_dim, in_dim] = w_shape[..] else {
        return Err(TensorError::InvalidShape {
            op: "conv_tree",
            shape: w_shape,
        });
    };
    let mut acc = None;
    for (mixture, w) in [
        (&mix.top, conv.w_top),
        (&mix.left, conv.w_left),
        (&mix.right, conv.w_right),
    ] {
        let mixed = g.mix_rows(x, Arc::clone(mixture))?;
        let w = g.reshape(w, &[slices * out_dim, in_dim])?;
        let wt = g.transpose(w)?;
        let term = g.matmul(mixed, wt)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    let bias = g.reshape(conv.bias, &[slices * out_dim])?;
    let bias = g.repeat(bias, nodes);
    let pre = g.add(acc.expect("three terms"), bias)?;
    Ok(g.tanh(pre))
}

/// Output of one slice for one window: `tanh(sum_i W_i x_i + b)`.
pub fn conv_node<F: Real>(window: &Window, x: &Tensor<F>, slice: &ConvSlice<F>) -> Vec<F> {
    let (out_dim, in_dim) = (slice.out_dim(), slice.in_dim());
    let mut y = slice.bias.data().to_vec();
    for m in &window.members {
        let e = eta(m, window.window_depth);
        let (t, l, r) = (
            F::from_f64(e.top),
            F::from_f64(e.left),
            F::from_f64(e.right),
        );
        let xi = x.row(m.node);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = o * in_dim;
            for (j, xj) in xi.iter().enumerate() {
                let w = t * slice.w_top.data()[row + j]
                    + l * slice.w_left.data()[row + j]
                    + r * slice.w_right.data()[row + j];
                *yo = *yo + w * *xj;
            }
        }
    }
    debug_assert_eq!(y.len(), out_dim);
    y.into_iter().map(F::tanh).collect()
}

/// Forward-only convolution of a vectorized tree. Returns `Y` of shape
/// `(T, V', ε)` with `Y[t, :, e]` the output of slice `e` at node `t`.
pub fn conv_tree<F: Real>(
    x: &Tensor<F>,
    stack: &ConvStack<F>,
    mix: &WindowMix<F>,
) -> Result<Tensor<F>, TensorError> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = stack.register(&mut g);
    let y = conv_tree_var(&mut g, xv, mix, &vars)?;
    let (t, e, o) = (x.shape()[0], stack.slices(), stack.out_dim());
    let flat = g.value(y).data();
    let mut data = vec![F::zero(); t * o * e];
    for node in 0..t {
        for s in 0..e {
            for f in 0..o {
                data[(node * o + f) * e + s] = flat[(node * e + s) * o + f];
            }
        }
    }
    Tensor::new(vec![t, o, e], data)
}
