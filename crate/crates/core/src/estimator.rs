//! Conditional vector-field estimator `v(x, t | c; θ)`.
//!
//! Pipeline for a latent `x: [L_x x D_x]` and condition `c: [L_c x D_c]`
//! with `L_x = r * L_c`:
//!
//! 1. the condition is length-regulated (each frame repeated `r` times);
//! 2. both sequences pass through a shallow stack
//!    `Conv1d(K=3) -> GELU -> Conv1d(K=3)` to `H/2` channels each;
//! 3. the two are concatenated along channels into `[L_x x H]`;
//! 4. a timestep token (sinusoid of `1000 t` through a two-layer MLP) is
//!    prepended and a learnable positional table is added;
//! 5. `N` pre-norm blocks apply self-attention and a convolutional FFN
//!    `Conv1d(H->F, K=3) -> GELU -> Conv1d(F->H, K=1)`, all without changing
//!    the sequence length;
//! 6. the timestep row is dropped and a LayerNorm + `Conv1d(H->D_x, K=3)`
//!    head produces the field.
//!
//! Trainable parameter count (see [`count_params`]):
//!
//! ```text
//! P = (3·D_x + 3·D_c)·H/2 + 2·3·(H/2)² + 4·H/2      branch stacks
//!   + 2·(H² + H)                                     timestep MLP
//!   + (max_seq_len + 1)·H                            positional table
//!   + N·(4H + 4(H² + H) + 3·H·F + F + F·H + H)       blocks
//!   + 2H + 3·H·D_x + D_x                             output head
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::LayerParams;
use crate::real::Real;
use crate::rng::{self, Purpose};
use crate::sampler::VectorField;
use crate::tensor::Tensor;

/// Latent sequence `[L_x x D_x]`.
pub type LatentSeq = Tensor<f32>;

const PROJ_KERNEL: usize = 3;
const FFN_KERNEL_IN: usize = 3;
const FFN_KERNEL_OUT: usize = 1;
const HEAD_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EstimatorConfig {
    /// Channels of `x`.
    pub latent_dim: usize,
    /// Channels of `c`.
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Latent frames per condition frame.
    pub regulate_ratio: usize,
    /// Reserved for a variant with cross-attention to the condition; must be false.
    #[cfg_attr(feature = "serde", serde(default))]
    pub cross_attention: bool,
}

impl EstimatorConfig {
    /// Desk-scale configuration: H=64, two layers, four heads, FFN 128.
    pub fn tiny(latent_dim: usize, cond_dim: usize, regulate_ratio: usize, max_seq_len: usize) -> Self {
        Self {
            latent_dim,
            cond_dim,
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_seq_len,
            regulate_ratio,
            cross_attention: false,
        }
    }

    fn scaled(latent_dim: usize, cond_dim: usize, layers: usize, hidden: usize, ffn: usize) -> Self {
        Self {
            latent_dim,
            cond_dim,
            hidden_dim: hidden,
            layers,
            heads: 8,
            ffn_dim: ffn,
            max_seq_len: 256,
            regulate_ratio: 1,
            cross_attention: false,
        }
    }

    pub fn small(latent_dim: usize, cond_dim: usize) -> Self {
        Self::scaled(latent_dim, cond_dim, 4, 384, 1536)
    }

    pub fn base(latent_dim: usize, cond_dim: usize) -> Self {
        Self::scaled(latent_dim, cond_dim, 4, 576, 2304)
    }

    pub fn large(latent_dim: usize, cond_dim: usize) -> Self {
        Self::scaled(latent_dim, cond_dim, 6, 768, 3072)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.cond_dim == 0 || self.hidden_dim == 0 {
            return bad("latent_dim, cond_dim and hidden_dim must be positive".into());
        }
        if self.hidden_dim % 2 != 0 {
            return bad(format!("hidden_dim {} must be even", self.hidden_dim));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.ffn_dim < self.hidden_dim {
            return bad(format!(
                "ffn_dim {} must be at least hidden_dim {}",
                self.ffn_dim, self.hidden_dim
            ));
        }
        if self.regulate_ratio == 0 {
            return bad("regulate_ratio must be at least 1".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if self.cross_attention {
            return bad("cross_attention is reserved and not implemented".into());
        }
        Ok(())
    }
}

/// Condition sequence `[L_c x D_c]`. With `null` set, the estimator consumes
/// an all-zero tensor of the same shape (the unconditional branch).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSeq {
    pub features: Tensor<f32>,
    pub null: bool,
}

impl ConditionSeq {
    pub fn new(features: Tensor<f32>) -> Self {
        Self {
            features,
            null: false,
        }
    }

    /// The same condition with the null flag set.
    pub fn to_null(&self) -> Self {
        Self {
            features: self.features.clone(),
            null: true,
        }
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.numel() == 0
    }

    /// Features as consumed by the network: zeros when null.
    pub fn effective(&self) -> Tensor<f32> {
        if self.null {
            Tensor::zeros(self.features.shape())
        } else {
            self.features.clone()
        }
    }
}

/// Repeats each condition frame `r` times: output row `i` is input row `i / r`.
pub fn length_regulate(c: &ConditionSeq, r: usize) -> Result<Tensor<f32>> {
    if r < 1 {
        return Err(Error::Config("regulate ratio must be at least 1".into()));
    }
    regulate(&c.effective(), r)
}

fn regulate<T: Real>(c: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if c.rank() != 2 {
        return Err(dim_err!("condition must be [L_c x D_c], got {:?}", c.shape()));
    }
    let (lc, dc) = (c.shape()[0], c.shape()[1]);
    let mut out = Vec::with_capacity(lc * r * dc);
    for i in 0..lc * r {
        out.extend_from_slice(c.row(i / r));
    }
    Tensor::new(vec![lc * r, dc], out)
}

/// Raw sinusoidal features of `1000 t`: `H/2` sines then `H/2` cosines with
/// geometric frequencies `10000^(-i/(H/2))`.
pub fn timestep_sinusoid<T: Real>(t: f64, h: usize) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("timestep {t} outside [0, 1]")));
    }
    if h < 2 || h % 2 != 0 {
        return Err(Error::Config(format!("embedding width {h} must be even")));
    }
    let half = h / 2;
    let mut out = vec![T::ZERO; h];
    for i in 0..half {
        let freq = libm::pow(10000.0, -(i as f64) / half as f64);
        let arg = 1000.0 * t * freq;
        out[i] = T::from_f64(libm::sin(arg));
        out[half + i] = T::from_f64(libm::cos(arg));
    }
    Tensor::new(vec![1, h], out)
}

/// Timestep token: sinusoid followed by the two-layer MLP, `[1 x H]`.
pub fn timestep_embed<T: Real>(g: &mut Graph<'_, T>, t: f64, h: usize) -> Result<Var> {
    let raw = g.constant(timestep_sinusoid(t, h)?);
    let a = nn::linear(g, raw, "time.0")?;
    let a = g.gelu(a)?;
    nn::linear(g, a, "time.1")
}

/// Channelwise concatenation `[x_proj | c_proj]`.
pub fn fuse<T: Real>(g: &mut Graph<'_, T>, x_proj: Var, c_proj: Var) -> Result<Var> {
    let (lx, lc) = (g.shape(x_proj)[0], g.shape(c_proj)[0]);
    if lx != lc {
        return Err(Error::Alignment(format!(
            "latent has {lx} frames but regulated condition has {lc}"
        )));
    }
    g.concat_cols(&[x_proj, c_proj])
}

fn branch<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let a = nn::conv(g, x, &format!("{prefix}.0"))?;
    let a = g.gelu(a)?;
    nn::conv(g, a, &format!("{prefix}.1"))
}

fn check_len<T: Real>(g: &Graph<'_, T>, v: Var, expected: usize, at: &str) -> Result<()> {
    let got = g.shape(v)[0];
    if got != expected {
        return Err(dim_err!("{at}: sequence length changed from {expected} to {got}"));
    }
    Ok(())
}

/// Builds the estimator on `g` (whose bound store holds the parameters).
///
/// `x` is a `[L_x x D_x]` node; `cond` is the effective condition (already
/// zeroed for the null branch).
pub fn forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &EstimatorConfig,
    x: Var,
    t: f64,
    cond: &Tensor<T>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 2 || xs[1] != cfg.latent_dim {
        return Err(dim_err!(
            "latent shape {:?} does not match latent_dim {}",
            xs,
            cfg.latent_dim
        ));
    }
    if cond.rank() != 2 || cond.shape()[1] != cfg.cond_dim {
        return Err(dim_err!(
            "condition shape {:?} does not match cond_dim {}",
            cond.shape(),
            cfg.cond_dim
        ));
    }
    let lx = xs[0];
    if lx > cfg.max_seq_len {
        return Err(Error::Capacity {
            len: lx,
            max: cfg.max_seq_len,
        });
    }
    if cond.shape()[0] * cfg.regulate_ratio != lx {
        return Err(dim_err!(
            "latent length {} != regulate_ratio {} x condition length {}",
            lx,
            cfg.regulate_ratio,
            cond.shape()[0]
        ));
    }
    let c = g.constant(regulate(cond, cfg.regulate_ratio)?);
    let xp = branch(g, x, "x_proj")?;
    let cp = branch(g, c, "c_proj")?;
    let fused = fuse(g, xp, cp)?;
    check_len(g, fused, lx, "fusion")?;

    let tok = timestep_embed(g, t, cfg.hidden_dim)?;
    let seq = g.concat_rows(&[tok, fused])?;
    let table = g.param("pos_emb")?;
    let pos = g.slice_rows(table, 0, lx + 1)?;
    let mut h = g.add(seq, pos)?;

    for i in 0..cfg.layers {
        let p = format!("blocks.{i}");
        let a = nn::layer_norm(g, h, &format!("{p}.ln1"))?;
        let a = nn::self_attention(g, a, &format!("{p}.attn"), cfg.heads)?;
        h = g.add(h, a)?;
        let f = nn::layer_norm(g, h, &format!("{p}.ln2"))?;
        let f = nn::conv(g, f, &format!("{p}.ffn.0"))?;
        let f = g.gelu(f)?;
        let f = nn::conv(g, f, &format!("{p}.ffn.1"))?;
        h = g.add(h, f)?;
        check_len(g, h, lx + 1, &p)?;
    }

    let frames = g.slice_rows(h, 1, lx)?;
    let o = nn::layer_norm(g, frames, "head.ln")?;
    let out = nn::conv(g, o, "head.conv")?;
    check_len(g, out, lx, "head")?;
    Ok(out)
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
}

fn param_specs(cfg: &EstimatorConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden_dim;
    let h2 = h / 2;
    let mut specs = Vec::new();
    let conv = |specs: &mut Vec<_>, name: String, cout: usize, cin: usize, k: usize, zero: bool| {
        let w = if zero { Init::Zeros } else { Init::Uniform(cin * k) };
        specs.push((format!("{name}.w"), vec![cout, cin, k], w));
        specs.push((format!("{name}.b"), vec![cout], Init::Zeros));
    };
    conv(&mut specs, "x_proj.0".into(), h2, cfg.latent_dim, PROJ_KERNEL, false);
    conv(&mut specs, "x_proj.1".into(), h2, h2, PROJ_KERNEL, false);
    conv(&mut specs, "c_proj.0".into(), h2, cfg.cond_dim, PROJ_KERNEL, false);
    conv(&mut specs, "c_proj.1".into(), h2, h2, PROJ_KERNEL, false);
    let linear = |specs: &mut Vec<_>, name: String, cin: usize, cout: usize| {
        specs.push((format!("{name}.w"), vec![cin, cout], Init::Uniform(cin)));
        specs.push((format!("{name}.b"), vec![cout], Init::Zeros));
    };
    linear(&mut specs, "time.0".into(), h, h);
    linear(&mut specs, "time.1".into(), h, h);
    specs.push(("pos_emb".into(), vec![cfg.max_seq_len + 1, h], Init::Zeros));
    let norm = |specs: &mut Vec<_>, name: String| {
        specs.push((format!("{name}.gain"), vec![h], Init::Ones));
        specs.push((format!("{name}.bias"), vec![h], Init::Zeros));
    };
    for i in 0..cfg.layers {
        let p = format!("blocks.{i}");
        norm(&mut specs, format!("{p}.ln1"));
        for m in ["q", "k", "v", "o"] {
            linear(&mut specs, format!("{p}.attn.{m}"), h, h);
        }
        norm(&mut specs, format!("{p}.ln2"));
        conv(&mut specs, format!("{p}.ffn.0"), cfg.ffn_dim, h, FFN_KERNEL_IN, false);
        conv(&mut specs, format!("{p}.ffn.1"), h, cfg.ffn_dim, FFN_KERNEL_OUT, false);
    }
    norm(&mut specs, "head.ln".into());
    conv(&mut specs, "head.conv".into(), cfg.latent_dim, h, HEAD_KERNEL, true);
    specs
}

/// Fresh parameters: uniform weights, zero biases, unit norm gains, zero
/// positional table and a zero output convolution (so the initial field is 0).
pub fn init_params(cfg: &EstimatorConfig, seed: u64) -> Result<LayerParams<f32>> {
    cfg.validate()?;
    let mut params = LayerParams::new();
    for (i, (name, shape, init)) in param_specs(cfg).into_iter().enumerate() {
        let mut t = Tensor::<f32>::zeros(&shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data_mut().fill(1.0),
            Init::Uniform(fan_in) => {
                let bound = 1.0 / libm::sqrt(fan_in as f64);
                let mut r = rng::stream(seed, Purpose::Init, i as u64, 0);
                for v in t.data_mut() {
                    *v = rng::uniform(&mut r, -bound, bound) as f32;
                }
            }
        }
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Exact number of trainable scalars for `cfg`.
pub fn count_params(cfg: &EstimatorConfig) -> usize {
    let (dx, dc, h, f) = (cfg.latent_dim, cfg.cond_dim, cfg.hidden_dim, cfg.ffn_dim);
    let h2 = h / 2;
    let stacks = (PROJ_KERNEL * dx * h2 + h2)
        + (PROJ_KERNEL * h2 * h2 + h2)
        + (PROJ_KERNEL * dc * h2 + h2)
        + (PROJ_KERNEL * h2 * h2 + h2);
    let time = 2 * (h * h + h);
    let pos = (cfg.max_seq_len + 1) * h;
    let block = 4 * h + 4 * (h * h + h) + (FFN_KERNEL_IN * h * f + f) + (FFN_KERNEL_OUT * f * h + h);
    let head = 2 * h + HEAD_KERNEL * h * dx + dx;
    stacks + time + pos + cfg.layers * block + head
}

/// Estimator with its parameters, usable as a [`VectorField`].
#[derive(Clone, Debug)]
pub struct Estimator {
    pub cfg: EstimatorConfig,
    pub params: LayerParams<f32>,
}

impl Estimator {
    pub fn new(cfg: EstimatorConfig, seed: u64) -> Result<Self> {
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: EstimatorConfig, params: LayerParams<f32>) -> Result<Self> {
        cfg.validate()?;
        let fresh = init_params(&cfg, 0)?;
        fresh.check_compatible(&params)?;
        Ok(Self { cfg, params })
    }
}

impl VectorField for Estimator {
    fn eval(&self, x: &Tensor<f32>, t: f64, c: &ConditionSeq) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &self.cfg, xv, t, &c.effective())?;
        Ok(g.tensor(out))
    }
}
