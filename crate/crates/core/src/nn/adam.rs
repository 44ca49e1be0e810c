use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First and second moment buffers, one pair per parameter slot.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S: Scalar = f32> {
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

/// One parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a, S: Scalar = f32> {
    pub name: String,
    pub tensor: &'a mut Tensor<S>,
    /// Pruning mask (true = kept); masked entries are pinned to zero.
    pub mask: Option<&'a [bool]>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState { step: 0, m: Vec::new(), v: Vec::new() }
    }
}

/// Global L2 norm of all gradients, in f64.
pub fn grad_norm<S: Scalar>(params: &[ParamSlot<'_, S>]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut [ParamSlot<'_, S>], max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let factor = S::from_f64_lossy(max_norm / (norm + 1e-6));
        for p in params.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
    norm
}

/// AdamW update. Gradients are read from each tensor's grad buffer; slots
/// without a gradient are treated as having a zero gradient.
pub fn adam_step<S: Scalar>(params: &mut [ParamSlot<'_, S>], state: &mut AdamState<S>, cfg: &AdamConfig) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { name: p.name.clone(), index, value: value.as_f64() });
            }
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![S::zero(); p.tensor.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} slots, got {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.tensor.numel() {
            return Err(Error::dim("adam state", &[state.m[i].len()], p.tensor.shape()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let b1 = S::from_f64_lossy(cfg.beta1);
    let b2 = S::from_f64_lossy(cfg.beta2);
    let one = S::one();
    let step_size = S::from_f64_lossy(cfg.lr / bc1);
    let inv_sqrt_bc2 = S::from_f64_lossy(1.0 / bc2.sqrt());
    let eps = S::from_f64_lossy(cfg.eps);
    let decay = S::from_f64_lossy(1.0 - cfg.lr * cfg.weight_decay);

    for (i, p) in params.iter_mut().enumerate() {
        let mask = p.mask;
        let apply_decay = p.decay && cfg.weight_decay != 0.0;
        let (data, grad) = p.tensor.data_and_grad_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..data.len() {
            if mask.is_some_and(|mk| !mk[j]) {
                data[j] = S::zero();
                m[j] = S::zero();
                v[j] = S::zero();
                continue;
            }
            let g = grad.map_or(S::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            if apply_decay {
                data[j] *= decay;
            }
            let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
            data[j] -= step_size * m[j] / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(t: &'a mut Tensor<f32>, mask: Option<&'a [bool]>) -> ParamSlot<'a, f32> {
        ParamSlot { name: "w".into(), tensor: t, mask, decay: true }
    }

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let mut t = Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap();
        t.set_grad(vec![0.0; 3]).unwrap();
        let before = t.data().to_vec();
        let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new();
        adam_step(&mut [slot(&mut t, None)], &mut st, &cfg).unwrap();
        assert_eq!(t.data(), &before[..]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut t = Tensor::new(vec![3], vec![0.5f32, -1.0, 2.0]).unwrap();
        t.set_grad(vec![0.3, -4.0, 1e-2]).unwrap();
        let cfg = AdamConfig { lr: 1e-3, weight_decay: 0.0, ..AdamConfig::default() };
        let mut st = AdamState::new();
        adam_step(&mut [slot(&mut t, None)], &mut st, &cfg).unwrap();
        let expected = [0.5 - 1e-3, -1.0 + 1e-3, 2.0 - 1e-3];
        for (a, e) in t.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn masked_entry_stays_zero() {
        let mut t = Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap();
        t.set_grad(vec![5.0, 5.0]).unwrap();
        let mask = [false, true];
        let mut st = AdamState::new();
        for _ in 0..10 {
            adam_step(&mut [slot(&mut t, Some(&mask))], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(t.data()[0], 0.0);
        assert!(t.data()[1] < 1.0);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut t = Tensor::new(vec![2], vec![0.0f32, 1.0]).unwrap();
        t.set_grad(vec![0.0, f32::NAN]).unwrap();
        let mut st = AdamState::new();
        let err = adam_step(&mut [slot(&mut t, None)], &mut st, &AdamConfig::default()).unwrap_err();
        match err {
            Error::NonFiniteGradient { name, index, .. } => {
                assert_eq!(name, "w");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = Tensor::new(vec![2], vec![0.0f32; 2]).unwrap();
        a.set_grad(vec![3.0, 4.0]).unwrap();
        let mut slots = [slot(&mut a, None)];
        let before = clip_grad_norm(&mut slots, 0.25);
        assert!((before - 5.0).abs() < 1e-9);
        assert!((grad_norm(&slots) - 0.25).abs() < 1e-4);
    }
}
