//! Fixed gradient-check cases: every layer on small random inputs, and the
//! end-to-end first-stage loss of the tiny estimator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::estimator::{self, init_params, EstimatorConfig};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective, Precision};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::LayerParams;
use crate::real::Real;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Linear,
    Conv3,
    Conv1,
    ChannelsFirstConv,
    LayerNorm,
    Attention,
    Gelu,
    Softmax,
    Matmul,
    Mul,
    Axpby,
    Transpose,
    SliceConcat,
    Mean,
    Mse,
}

struct Case {
    layer: Layer,
    probe: Tensor<f64>,
}

impl Objective for Case {
    fn loss<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let x = g.param("x")?;
        let y = match self.layer {
            Layer::Linear => nn::linear(g, x, "lin")?,
            Layer::Conv3 => nn::conv(g, x, "c3")?,
            Layer::Conv1 => nn::conv(g, x, "c1")?,
            Layer::ChannelsFirstConv => {
                let w = g.param("c3.w")?;
                let xt = g.transpose(x)?;
                nn::conv1d_channels_first(g, xt, w, 1)?
            }
            Layer::LayerNorm => {
                let wide = g.param("x_wide")?;
                nn::layer_norm(g, wide, "ln")?
            }
            Layer::Attention => nn::self_attention(g, x, "attn", 2)?,
            Layer::Gelu => g.gelu(x)?,
            Layer::Softmax => g.softmax_lastdim(x)?,
            Layer::Matmul => {
                let w = g.param("lin.w")?;
                g.matmul(x, w)?
            }
            Layer::Mul => {
                let y = g.param("y")?;
                g.mul(x, y)?
            }
            Layer::Axpby => {
                let y = g.param("y")?;
                g.axpby(4.5, x, -3.5, y)?
            }
            Layer::Transpose => g.transpose(x)?,
            Layer::SliceConcat => {
                let a = g.slice_cols(x, 0, 2)?;
                let b = g.slice_cols(x, 2, 2)?;
                let r = g.slice_rows(x, 1, 3)?;
                let r = g.concat_rows(&[r, x])?;
                let r = g.slice_cols(r, 0, 4)?;
                let c = g.concat_cols(&[b, a])?;
                let top = g.slice_rows(r, 0, 5)?;
                g.add(c, top)?
            }
            Layer::Mean => {
                let m = g.mean(x)?;
                let s = g.mul(m, m)?;
                return g.sum(s);
            }
            Layer::Mse => {
                let y = g.param("y")?;
                return g.mse(x, y);
            }
        };
        let p = g.constant(self.probe.cast());
        let prod = g.mul(y, p)?;
        g.sum(prod)
    }
}

fn randn(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    rng::normal_tensor::<f64>(&mut rng::stream(seed, Purpose::Probe, 0, 0), shape).map(|v| v * scale)
}

/// Params for the layer cases: `x: [5 x 4]` plus every layer's weights.
fn store() -> LayerParams<f64> {
    let mut p = LayerParams::new();
    let mut s = 100;
    let mut put = |p: &mut LayerParams<f64>, name: &str, shape: &[usize], scale: f64| {
        s += 1;
        p.insert(name, randn(s, shape, scale)).unwrap();
    };
    put(&mut p, "x", &[5, 4], 1.0);
    put(&mut p, "y", &[5, 4], 1.0);
    // LayerNorm curvature grows as the row spread shrinks; a wide input keeps
    // the h = 1e-3 truncation error well under the f64 tolerance.
    put(&mut p, "x_wide", &[5, 4], 5.0);
    put(&mut p, "lin.w", &[4, 3], 0.5);
    put(&mut p, "lin.b", &[3], 0.5);
    put(&mut p, "c3.w", &[3, 4, 3], 0.5);
    put(&mut p, "c3.b", &[3], 0.5);
    put(&mut p, "c1.w", &[6, 4, 1], 0.5);
    put(&mut p, "c1.b", &[6], 0.5);
    put(&mut p, "ln.gain", &[4], 1.0);
    put(&mut p, "ln.bias", &[4], 1.0);
    for n in ["q", "k", "v", "o"] {
        put(&mut p, &format!("attn.{n}.w"), &[4, 4], 0.7);
        put(&mut p, &format!("attn.{n}.b"), &[4], 0.3);
    }
    p
}

fn out_shape(layer: Layer) -> Vec<usize> {
    match layer {
        Layer::Linear | Layer::Conv3 | Layer::Matmul => vec![5, 3],
        Layer::Conv1 => vec![5, 6],
        Layer::ChannelsFirstConv => vec![3, 5],
        Layer::Transpose => vec![4, 5],
        _ => vec![5, 4],
    }
}

pub const LAYERS: [Layer; 15] = [
    Layer::Linear,
    Layer::Conv3,
    Layer::Conv1,
    Layer::ChannelsFirstConv,
    Layer::LayerNorm,
    Layer::Attention,
    Layer::Gelu,
    Layer::Softmax,
    Layer::Matmul,
    Layer::Mul,
    Layer::Axpby,
    Layer::Transpose,
    Layer::SliceConcat,
    Layer::Mean,
    Layer::Mse,
];

/// Checks one layer case; `x` is always checked in full.
pub fn check_layer(layer: Layer, precision: Precision) -> Result<GradCheckReport> {
    let i = LAYERS.iter().position(|&l| l == layer).unwrap_or(0);
    let case = Case {
        layer,
        probe: randn(7 + i as u64, &out_shape(layer), 1.0),
    };
    let cfg = GradCheckConfig {
        precision,
        ..GradCheckConfig::default()
    };
    grad_check(&case, &store(), &cfg)
}

/// First-stage loss of the tiny estimator at a fixed draw, with every
/// parameter perturbed away from its (partly zero) initial value.
struct RfmObjective {
    cfg: EstimatorConfig,
    xt: Tensor<f64>,
    u: Tensor<f64>,
    c: Tensor<f64>,
    t: f64,
    weight: f64,
}

impl Objective for RfmObjective {
    fn loss<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let x = g.constant(self.xt.cast());
        let v = estimator::forward(g, &self.cfg, x, self.t, &self.c.cast())?;
        let u = g.constant(self.u.cast());
        let l = g.mse(v, u)?;
        g.scale(l, self.weight)
    }
}

/// Checks up to 8 entries of every estimator tensor.
pub fn check_end_to_end(precision: Precision) -> Result<GradCheckReport> {
    let cfg = EstimatorConfig::tiny(4, 8, 2, 64);
    let base: LayerParams<f64> = init_params(&cfg, 3).unwrap().cast();
    let mut params = base.clone();
    for i in 0..params.len() {
        let shape = params.get_index(i).shape().to_vec();
        let noise = randn(1000 + i as u64, &shape, 0.1);
        let t = params.get_index_mut(i);
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += b;
        }
    }
    let t = 0.37;
    let x0 = randn(1, &[6, 4], 1.0);
    let x1 = randn(2, &[6, 4], 1.0);
    let xt = x0.zip_map(&x1, |a, b| (1.0 - t) * a + t * b).unwrap();
    let u = x0.zip_map(&x1, |a, b| b - a).unwrap();
    let obj = RfmObjective {
        cfg,
        xt,
        u,
        c: randn(3, &[3, 8], 1.0),
        t,
        weight: crate::rfm::logit_normal_weight(t)?,
    };
    grad_check(
        &obj,
        &params,
        &GradCheckConfig {
            precision,
            max_per_tensor: 8,
            ..GradCheckConfig::default()
        },
    )
}
