//! Central finite-difference gradient checks.
//!
//! The reference derivative is always computed in `f64` (the shadow mode).
//! The analytic side runs either in `f64` or in the `f32` training precision.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::LayerParams;
use crate::real::Real;

/// A scalar function of the parameters in a [`LayerParams`], written once
/// and evaluated at either precision.
pub trait Objective {
    fn loss<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorReport> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub precision: Precision,
    /// Finite-difference step.
    pub h: f64,
    /// At most this many evenly strided elements per tensor are probed.
    pub max_per_tensor: usize,
    /// Error denominators never drop below this fraction of the global
    /// numeric gradient norm, so gradients that vanish identically (such as
    /// a key bias under softmax) are judged against the overall scale.
    pub zero_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            h: 1e-3,
            max_per_tensor: usize::MAX,
            zero_floor: 1e-3,
        }
    }
}

pub fn eval_loss<T: Real, O: Objective>(obj: &O, params: &LayerParams<T>) -> Result<f64> {
    let mut g = Graph::with_params(params);
    let l = obj.loss(&mut g)?;
    Ok(g.value(l)[0].to_f64())
}

fn analytic<T: Real, O: Objective>(obj: &O, params: &LayerParams<f64>) -> Result<Vec<Vec<f64>>> {
    let cast: LayerParams<T> = params.cast();
    let mut g = Graph::with_params(&cast);
    let l = obj.loss(&mut g)?;
    let grads = g.backward(l)?;
    Ok(grads
        .into_param_grads(&cast)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x.to_f64()).collect())
        .collect())
}

/// Compares analytic gradients of `obj` with central differences.
///
/// The relative error of a tensor is `|a - n| / max(|a|, |n|, f·|N|, 1e-12)`
/// over the probed elements, using Euclidean norms, where `N` is the numeric
/// gradient over every probed element and `f` is `cfg.zero_floor`.
pub fn grad_check<O: Objective>(
    obj: &O,
    params: &LayerParams<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let grads = match cfg.precision {
        Precision::F64 => analytic::<f64, O>(obj, params)?,
        Precision::F32 => analytic::<f32, O>(obj, params)?,
    };
    let mut work = params.clone();
    let mut probes: Vec<Vec<(f64, f64)>> = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let n = params.get_index(idx).numel();
        let stride = if n > cfg.max_per_tensor {
            n.div_ceil(cfg.max_per_tensor)
        } else {
            1
        };
        let mut pairs = Vec::new();
        let mut j = 0;
        while j < n {
            let orig = work.get_index(idx).data()[j];
            work.get_index_mut(idx).data_mut()[j] = orig + cfg.h;
            let fp = eval_loss(obj, &work)?;
            work.get_index_mut(idx).data_mut()[j] = orig - cfg.h;
            let fm = eval_loss(obj, &work)?;
            work.get_index_mut(idx).data_mut()[j] = orig;
            pairs.push((grads[idx][j], (fp - fm) / (2.0 * cfg.h)));
            j += stride;
        }
        probes.push(pairs);
    }
    let global: f64 = probes.iter().flatten().map(|(_, n)| n * n).sum();
    let floor = (cfg.zero_floor * libm::sqrt(global)).max(1e-12);
    let tensors = probes
        .iter()
        .enumerate()
        .map(|(idx, pairs)| {
            let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for &(a, n) in pairs {
                diff2 += (a - n) * (a - n);
                a2 += a * a;
                n2 += n * n;
            }
            let denom = libm::sqrt(a2).max(libm::sqrt(n2)).max(floor);
            TensorReport {
                name: params.name(idx).into(),
                checked: pairs.len(),
                rel_err: libm::sqrt(diff2) / denom,
            }
        })
        .collect();
    Ok(GradCheckReport { tensors })
}
