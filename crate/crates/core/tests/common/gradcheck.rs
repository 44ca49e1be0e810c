//! Central finite-difference gradient oracle.
//!
//! Each case is a loss built from a list of leaf tensors. The oracle
//! evaluates the same case in f64 with every leaf constant and differentiates
//! numerically; autodiff results (f32 or f64) are compared against it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinydt::nn::{causal_self_attention, BoundLayer, Graph, QueryRows, Tensor, Var};
use tinydt::Scalar;

pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    Linear,
    LayerNorm,
    Embedding,
    Gelu,
    Tanh,
    Attention,
    AttentionRows,
    MaskedMse,
    Dropout,
    Mlp,
}

pub const ALL_CASES: [Case; 10] = [
    Case::Linear,
    Case::LayerNorm,
    Case::Embedding,
    Case::Gelu,
    Case::Tanh,
    Case::Attention,
    Case::AttentionRows,
    Case::MaskedMse,
    Case::Dropout,
    Case::Mlp,
];

/// Leaf tensors (all differentiated) plus a fixed projection used to reduce
/// the output to a scalar.
pub fn inputs(case: Case, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize], std: f64| Tensor::<f64>::randn(shape, std, &mut rng);
    match case {
        Case::Linear => vec![r(&[2, 3, 5], 1.0), r(&[4, 5], 0.5), r(&[4], 0.5), r(&[2, 3, 4], 1.0)],
        Case::LayerNorm => vec![r(&[3, 6], 2.0), r(&[6], 1.0), r(&[6], 1.0), r(&[3, 6], 1.0)],
        Case::Embedding => vec![r(&[7, 4], 1.0), r(&[5, 4], 1.0)],
        Case::Gelu | Case::Tanh | Case::Dropout => vec![r(&[12], 1.5), r(&[12], 1.0)],
        Case::Attention => vec![
            r(&[2, 5, 8], 1.0),
            r(&[24, 8], 0.4),
            r(&[24], 0.1),
            r(&[8, 8], 0.4),
            r(&[8], 0.1),
            r(&[2, 5, 8], 1.0),
        ],
        Case::AttentionRows => vec![
            r(&[2, 5, 8], 1.0),
            r(&[24, 8], 0.4),
            r(&[24], 0.1),
            r(&[8, 8], 0.4),
            r(&[8], 0.1),
            r(&[2, 2, 8], 1.0),
        ],
        Case::MaskedMse => vec![r(&[4, 3], 1.0), r(&[4, 3], 1.0)],
        Case::Mlp => vec![
            r(&[6, 17], 1.0),
            r(&[32, 17], 0.3),
            r(&[32], 0.1),
            r(&[8, 32], 0.3),
            r(&[8], 0.1),
            r(&[6, 8], 0.5),
        ],
    }
}

/// Number of leading inputs that are differentiated (the rest are constants).
pub fn num_diff(case: Case) -> usize {
    match case {
        Case::Linear | Case::LayerNorm => 3,
        Case::Embedding | Case::Gelu | Case::Tanh | Case::Dropout => 1,
        Case::Attention | Case::AttentionRows => 5,
        Case::MaskedMse => 1,
        Case::Mlp => 5,
    }
}

fn project<S: Scalar>(g: &mut Graph<S>, y: Var, r: Var) -> Var {
    let p = g.mul(y, r).unwrap();
    g.sum(p)
}

/// Build the scalar loss for `case` over already-bound leaves.
pub fn build<S: Scalar>(case: Case, seed: u64, g: &mut Graph<S>, v: &[Var]) -> Var {
    match case {
        Case::Linear => {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            project(g, y, v[3])
        }
        Case::LayerNorm => {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            project(g, y, v[3])
        }
        Case::Embedding => {
            let y = g.gather_rows(v[0], vec![1, 3, 3, 6, 0]).unwrap();
            project(g, y, v[1])
        }
        Case::Gelu => {
            let y = g.gelu(v[0]);
            project(g, y, v[1])
        }
        Case::Tanh => {
            let y = g.tanh(v[0]);
            project(g, y, v[1])
        }
        Case::Dropout => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD5);
            let y = g.dropout(v[0], 0.3, &mut rng);
            project(g, y, v[1])
        }
        Case::Attention => {
            let valid = [true, true, false, true, true, false, true, true, true, true];
            let qkv = BoundLayer { weight: v[1], bias: Some(v[2]) };
            let proj = BoundLayer { weight: v[3], bias: Some(v[4]) };
            let y = causal_self_attention(g, v[0], qkv, proj, 2, 5, 2, Some(&valid), QueryRows::all(5)).unwrap();
            project(g, y, v[5])
        }
        Case::AttentionRows => {
            let valid = [true, false, true, true, true, true, true, false, true, true];
            let qkv = BoundLayer { weight: v[1], bias: Some(v[2]) };
            let proj = BoundLayer { weight: v[3], bias: Some(v[4]) };
            let rows = QueryRows { offset: 1, stride: 2, count: 2 };
            let y = causal_self_attention(g, v[0], qkv, proj, 2, 5, 2, Some(&valid), rows).unwrap();
            project(g, y, v[5])
        }
        Case::MaskedMse => {
            let target: Vec<S> = g.value(v[1]).to_vec();
            let w: Vec<S> = [1.0, 0.0, 1.0, 1.0].iter().map(|&x| S::from_f64_lossy(x)).collect();
            g.masked_mse(v[0], &target, &w).unwrap()
        }
        Case::Mlp => {
            let h = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let h = g.gelu(h);
            let y = g.linear(h, v[3], Some(v[4])).unwrap();
            let y = g.tanh(y);
            let target: Vec<S> = g.value(v[5]).to_vec();
            let w = vec![S::one(); 6];
            g.masked_mse(y, &target, &w).unwrap()
        }
    }
}

/// Autodiff gradients of the differentiated inputs, computed in scalar `S`.
pub fn autodiff<S: Scalar>(case: Case, seed: u64, xs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let nd = num_diff(case);
    let mut g = Graph::<S>::new();
    let vars: Vec<Var> = xs.iter().enumerate().map(|(i, t)| g.leaf(&t.cast::<S>(), i < nd)).collect();
    let loss = build(case, seed, &mut g, &vars);
    let grads = g.backward(loss).unwrap();
    vars[..nd]
        .iter()
        .zip(xs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()).iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn eval_f64(case: Case, seed: u64, xs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t, false)).collect();
    let loss = build(case, seed, &mut g, &vars);
    g.value(loss)[0]
}

/// Central differences with step [`FD_STEP`], accumulated in f64.
pub fn finite_differences(case: Case, seed: u64, xs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let nd = num_diff(case);
    let mut work = xs.to_vec();
    let mut out = Vec::new();
    for i in 0..nd {
        let mut gi = Vec::with_capacity(xs[i].numel());
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = eval_f64(case, seed, &work);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = eval_f64(case, seed, &work);
            work[i].data_mut()[j] = orig;
            gi.push((up - down) / (2.0 * FD_STEP));
        }
        out.push(gi);
    }
    out
}

/// Largest elementwise relative error. The denominator is floored at 1e-3 of
/// the tensor's largest oracle magnitude so that entries that are zero up to
/// rounding do not dominate.
pub fn max_rel_error(auto: &[Vec<f64>], oracle: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (a, o) in auto.iter().zip(oracle) {
        let scale = o.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let floor = (1e-3 * scale).max(1e-9);
        for (&x, &y) in a.iter().zip(o) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
