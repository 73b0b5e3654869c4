//! Layers built from graph primitives. Parameters are looked up by
//! `prefix.<name>` in the graph's bound store.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;

/// `x W + b` with `W: [in x out]` at `prefix.w` and `b: [out]` at `prefix.b`.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Same-length temporal convolution on `[L x C]`; the kernel size comes from
/// `prefix.w: [C_out x C_in x K]` and must be odd.
pub fn conv<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let k = g.shape(w)[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!("{prefix}: kernel size {k} is not odd")));
    }
    g.conv1d(x, w, Some(b), (k - 1) / 2)
}

/// Convolution in channels-first layout: `x: [C_in x L]` -> `[C_out x L_out]`.
pub fn conv1d_channels_first<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    w: Var,
    padding: usize,
) -> Result<Var> {
    let xt = g.transpose(x)?;
    let y = g.conv1d(xt, w, None, padding)?;
    g.transpose(y)
}

pub fn layer_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Multi-head scaled dot-product self-attention over `x: [L x D]`.
///
/// Projections live at `prefix.{q,k,v,o}`; each head attends over
/// `D / heads` channels with scale `1/sqrt(D / heads)`.
pub fn self_attention<T: Real>(g: &mut Graph<'_, T>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let d = g.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible into {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);
    let q = linear(g, x, &format!("{prefix}.q"))?;
    let k = linear(g, x, &format!("{prefix}.k"))?;
    let v = linear(g, x, &format!("{prefix}.v"))?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_lastdim(scores)?;
        outs.push(g.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, joined, &format!("{prefix}.o"))
}
