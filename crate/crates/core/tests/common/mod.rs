//! Scalar-loop reference implementations and random fixtures shared by
//! the integration tests. Nothing here calls the library's numeric code
//! except `gradcheck`, which drives the finite-difference checker.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treecaps::conv::ConvStack;
use treecaps::{AstNode, Tree};

pub type Vec2 = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec2 {
    (0..rows).map(|_| random_vec(rng, cols, scale)).collect()
}

/// Random tree with exactly `nodes` nodes over `types` type names.
pub fn random_tree(rng: &mut ChaCha8Rng, nodes: usize, types: usize) -> Tree {
    assert!(nodes >= 1);
    let mut parent = vec![usize::MAX];
    for i in 1..nodes {
        parent.push(rng.gen_range(0..i));
    }
    let names: Vec<String> = (0..nodes)
        .map(|_| format!("t{}", rng.gen_range(0..types)))
        .collect();
    fn build(i: usize, parent: &[usize], names: &[String]) -> AstNode {
        let kids = (0..parent.len())
            .filter(|&c| parent[c] == i)
            .map(|c| build(c, parent, names))
            .collect();
        AstNode::with_children(names[i].clone(), kids)
    }
    Tree::from_ast(&build(0, &parent, &names), 10_000).unwrap()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squash(u: &[f64]) -> Vec<f64> {
    let n = norm(u);
    u.iter()
        .map(|x| n * n / (1.0 + n * n) * x / (n + 1e-9))
        .collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Coefficients `(top, left, right)` of a member at top-down offset
/// `level` (0 = window root) with 1-based sibling `position` of `k`.
pub fn coefficients(level: usize, position: usize, k: usize, d: usize) -> (f64, f64, f64) {
    let top = if d == 1 {
        1.0
    } else {
        (d - level - 1) as f64 / (d - 1) as f64
    };
    let rho = if k == 1 {
        0.5
    } else {
        (position - 1) as f64 / (k - 1) as f64
    };
    (top, (1.0 - top) * (1.0 - rho), (1.0 - top) * rho)
}

/// `Y[t][f][e]` by explicit window enumeration and per-coordinate sums.
pub fn conv_tree(tree: &Tree, x: &Vec2, stack: &ConvStack<f64>, d: usize) -> Vec<Vec2> {
    let (slices, out_dim, in_dim) = (stack.slices(), stack.out_dim(), stack.in_dim());
    let w = |t: &treecaps::Tensor<f64>, e: usize, o: usize, i: usize| {
        t.data()[(e * out_dim + o) * in_dim + i]
    };
    let mut y = vec![vec![vec![0.0; slices]; out_dim]; tree.len()];
    for root in 0..tree.len() {
        // (node, level, position, siblings)
        let mut members = vec![(root, 0usize, 1usize, 1usize)];
        let mut frontier = vec![(root, 0usize)];
        while let Some((node, level)) = frontier.pop() {
            if level + 1 >= d {
                continue;
            }
            let kids = tree.children(node);
            for (p, &c) in kids.iter().enumerate() {
                members.push((c, level + 1, p + 1, kids.len()));
                frontier.push((c, level + 1));
            }
        }
        for e in 0..slices {
            for o in 0..out_dim {
                let mut acc = stack.bias.data()[e * out_dim + o];
                for &(node, level, p, k) in &members {
                    let (ct, cl, cr) = coefficients(level, p, k, d);
                    for i in 0..in_dim {
                        let wi = ct * w(&stack.w_top, e, o, i)
                            + cl * w(&stack.w_left, e, o, i)
                            + cr * w(&stack.w_right, e, o, i);
                        acc += wi * x[node][i];
                    }
                }
                y[root][o][e] = acc.tanh();
            }
        }
    }
    y
}

/// Variable-to-static routing, written directly from its pseudo-code.
pub fn route_static(u: &Vec2, a: usize, b: usize, r: usize) -> Vec2 {
    let dim = u[0].len();
    let mut caps = u.clone();
    while caps.len() < a {
        caps.push(vec![0.0; dim]);
    }
    let mut idx: Vec<usize> = (0..caps.len()).collect();
    // insertion sort, descending norm, earlier index first on ties
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && norm(&caps[idx[j]]) > norm(&caps[idx[j - 1]]) {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    let b = b.min(caps.len());
    let routed: Vec2 = idx[..b].iter().map(|&i| caps[i].clone()).collect();
    let mut v: Vec2 = idx[..a].iter().map(|&i| caps[i].clone()).collect();
    let mut alpha = vec![vec![0.0; a]; b];
    for _ in 0..r {
        for i in 0..b {
            for j in 0..a {
                let mut f = 0.0;
                for k in 0..dim {
                    f += routed[i][k] * v[j][k];
                }
                alpha[i][j] += f;
            }
        }
        let beta: Vec2 = alpha.iter().map(|row| softmax(row)).collect();
        for j in 0..a {
            let mut s = vec![0.0; dim];
            for i in 0..b {
                for k in 0..dim {
                    s[k] += beta[i][j] * routed[i][k];
                }
            }
            v[j] = squash(&s);
        }
    }
    v
}

/// `p[j][m] = W[j][m] v[j]` with `w[j][m][row][col]`.
pub fn predict(v: &Vec2, w: &[Vec<Vec2>]) -> Vec<Vec2> {
    w.iter()
        .zip(v)
        .map(|(wj, vj)| {
            wj.iter()
                .map(|wjm| {
                    wjm.iter()
                        .map(|row| row.iter().zip(vj).map(|(a, b)| a * b).sum())
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Dynamic routing of `p[j][m]` predictions, written from its pseudo-code.
pub fn route_dynamic(p: &[Vec2], t: usize) -> Vec2 {
    let (a, classes, dim) = (p.len(), p[0].len(), p[0][0].len());
    let mut delta = vec![vec![0.0; classes]; a];
    let mut z = vec![vec![0.0; dim]; classes];
    for _ in 0..t {
        let gamma: Vec2 = delta.iter().map(|row| softmax(row)).collect();
        for m in 0..classes {
            let mut s = vec![0.0; dim];
            for j in 0..a {
                for k in 0..dim {
                    s[k] += gamma[j][m] * p[j][m][k];
                }
            }
            z[m] = squash(&s);
        }
        for j in 0..a {
            for m in 0..classes {
                delta[j][m] += (0..dim).map(|k| p[j][m][k] * z[m][k]).sum::<f64>();
            }
        }
    }
    z
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn flatten(v: &Vec2) -> Vec<f64> {
    v.iter().flatten().cloned().collect()
}
