//! Adam with bias correction and optional global-norm clipping.

use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::params::LayerParams;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moments, index-aligned with a [`LayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: LayerParams<f32>,
    pub v: LayerParams<f32>,
}

impl AdamState {
    pub fn new(params: &LayerParams<f32>) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Global L2 norm of a gradient set, accumulated in `f64` in index order.
pub fn global_norm(grads: &[Vec<f32>]) -> f64 {
    let mut s = 0.0f64;
    for g in grads {
        for &x in g {
            s += (x as f64) * (x as f64);
        }
    }
    libm::sqrt(s)
}

/// Scales `grads` in place so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One Adam update. `grads` must be index-aligned with `params`.
pub fn adam_step(
    params: &mut LayerParams<f32>,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    state.m.check_compatible(params)?;
    state.v.check_compatible(params)?;
    if grads.len() != params.len() {
        return Err(dim_err!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.get_index(i).numel() {
            return Err(dim_err!(
                "gradient for `{}` has {} elements, parameter has {}",
                params.name(i),
                g.len(),
                params.get_index(i).numel()
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_index_mut(i).data_mut();
        let m = state.m.get_index_mut(i).data_mut();
        let v = state.v.get_index_mut(i).data_mut();
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            p[j] -= (cfg.lr * mhat / (libm::sqrt(vhat) + cfg.eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn single(v: f32) -> LayerParams<f32> {
        let mut p = LayerParams::new();
        p.insert("x", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0]], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // step 1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps)
        for g in [0.3f32, -2.5, 1e-2] {
            let mut p = single(1.0);
            let mut st = AdamState::new(&p);
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            adam_step(&mut p, &[vec![g]], &mut st, &cfg).unwrap();
            let moved = p.get("x").unwrap().data()[0] - 1.0;
            let expected = -0.01 * g.signum();
            assert!((moved - expected).abs() < 1e-6, "g={g}: moved {moved}");
        }
    }

    #[test]
    fn constant_gradient_descends_quadratic() {
        // f(x) = x^2 from x = 1; gradient held at its initial value 2
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let f = |x: f32| x * x;
        let mut last = f(1.0);
        for _ in 0..2 {
            adam_step(&mut p, &[vec![2.0]], &mut st, &cfg).unwrap();
            let now = f(p.get("x").unwrap().data()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&single(0.0));
        st.m = LayerParams::new();
        assert!(adam_step(&mut p, &[vec![1.0]], &mut st, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }
}
