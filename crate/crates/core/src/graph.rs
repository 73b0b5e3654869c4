//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in creation order, so node ids are a
//! topological order by construction. [`Graph::backward`] walks the tape once
//! in reverse. Parameters are borrowed from a [`LayerParams`] rather than
//! copied; their gradients come back index-aligned with the store.

use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use crate::error::{dim_err, Error, Result};
use crate::params::LayerParams;
use crate::real::Real;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Conv1d { x: Var, w: Var, b: Option<Var>, pad: usize },
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op,
    shape: Vec<usize>,
    value: Vec<T>,
    // Saved forward quantities (normalized rows for layer norm, etc.)
    aux: Vec<T>,
    needs_grad: bool,
}

/// Tape of operations. `'p` is the lifetime of the bound parameter store.
pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Option<&'p LayerParams<T>>,
    bound: Vec<Option<Var>>,
    checked: bool,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            checked: false,
        }
    }

    /// Graph whose parameter leaves read from `params`.
    pub fn with_params(params: &'p LayerParams<T>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            bound: vec![None; params.len()],
            checked: false,
        }
    }

    /// In checked mode every op output is scanned for NaN/Inf.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(i) => self.params.expect("param node without store").get_index(i).data(),
            _ => &node.value,
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.nodes[v.0].shape.clone(), self.value(v).to_vec())
            .expect("node shape matches value")
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<T>, aux: Vec<T>, needs_grad: bool) -> Result<Var> {
        if self.checked && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("{:?}", op_name(&op))));
        }
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Input leaf; when `requires_grad` its gradient is kept after backward.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.nodes.push(Node {
            op: Op::Input,
            shape,
            value: data,
            aux: Vec::new(),
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to the named entry of the parameter store. Repeated calls
    /// return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        let idx = params
            .index_of(name)
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        if let Some(v) = self.bound[idx] {
            return Ok(v);
        }
        let shape = params.get_index(idx).shape().to_vec();
        self.nodes.push(Node {
            op: Op::Param(idx),
            shape,
            value: Vec::new(),
            aux: Vec::new(),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[idx] = Some(v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul shapes {:?} x {:?} are incompatible", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), vec![m, n], out, Vec::new(), ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{} shape mismatch {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(Op::Add(a, b), shape, out, Vec::new(), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub(a, b), shape, out, Vec::new(), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul(a, b), shape, out, Vec::new(), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let st = T::from_f64(s);
        let out = self.value(a).iter().map(|&x| x * st).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape, out, Vec::new(), ng)
    }

    /// `alpha * a + beta * b`.
    pub fn axpby(&mut self, alpha: f64, a: Var, beta: f64, b: Var) -> Result<Var> {
        let sa = self.scale(a, alpha)?;
        let sb = self.scale(b, beta)?;
        self.add(sa, sb)
    }

    /// Adds a length-`n` vector to every row of an `[.. x n]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.rc(a);
        if self.value(row).len() != n {
            return Err(dim_err!(
                "row broadcast of {:?} onto {:?}",
                self.shape(row),
                self.shape(a)
            ));
        }
        let r = self.value(row);
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(av[i * n..(i + 1) * n].iter().zip(r).map(|(&x, &y)| x + y));
        }
        let ng = self.ng(a) || self.ng(row);
        let shape = self.shape(a).to_vec();
        self.push(Op::AddRow(a, row), shape, out, Vec::new(), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Gelu(a), shape, out, Vec::new(), ng)
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rc(a);
        let av = self.value(a);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let o = &mut out[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(row[0], |acc, v| acc.max(v));
            let mut s = T::ZERO;
            for (oj, &x) in o.iter_mut().zip(row) {
                *oj = (x - mx).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape, out, Vec::new(), ng)
    }

    /// Per-row normalization over the last dimension, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.rc(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(dim_err!(
                "layer_norm affine {:?}/{:?} does not match width {}",
                self.shape(gain),
                self.shape(bias),
                n
            ));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let nt = T::from_usize(n);
        let eps = T::from_f64(LAYER_NORM_EPS);
        // aux: normalized rows followed by one inverse std per row
        let mut aux = vec![T::ZERO; m * n + m];
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let inv = T::ONE / (var + eps).sqrt();
            aux[m * n + i] = inv;
            for j in 0..n {
                let xh = (row[j] - mean) * inv;
                aux[i * n + j] = xh;
                out[i * n + j] = xh * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let shape = self.shape(x).to_vec();
        self.push(Op::LayerNorm { x, gain, bias }, shape, out, aux, ng)
    }

    /// Temporal convolution (cross-correlation) on a time-major sequence.
    ///
    /// `x` is `[L x C_in]`, `w` is `[C_out x C_in x K]`, `b` is `[C_out]`.
    /// Output is `[L + 2*pad - K + 1, C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(dim_err!(
                "conv1d input {:?} vs weight {:?}: channel mismatch",
                sx,
                sw
            ));
        }
        let (l, cin, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
        if l + 2 * pad < k {
            return Err(dim_err!("conv1d kernel {} longer than padded input {}", k, l + 2 * pad));
        }
        let lout = l + 2 * pad + 1 - k;
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(dim_err!("conv1d bias {:?} for {} channels", self.shape(b), cout));
            }
        }
        let cols = kernels::im2col(self.value(x), l, cin, k, pad, lout);
        let w2 = kernels::conv_weight_matrix(self.value(w), cout, cin, k);
        let mut out = vec![T::ZERO; lout * cout];
        kernels::matmul_acc(&cols, &w2, &mut out, lout, k * cin, cout);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Op::Conv1d { x, w, b, pad }, vec![lout, cout], out, Vec::new(), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err!("transpose needs rank 2, got {:?}", s));
        }
        let (m, n) = (s[0], s[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::transpose(self.value(a), &mut out, m, n);
        let ng = self.ng(a);
        self.push(Op::Transpose(a), vec![n, m], out, Vec::new(), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rc(a);
        if self.shape(a).len() != 2 || start + len > n || len == 0 {
            return Err(dim_err!("column slice {}..{} of {:?}", start, start + len, self.shape(a)));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        self.push(Op::SliceCols { x: a, start }, vec![m, len], out, Vec::new(), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(dim_err!("column concat of {:?} with {} rows", s, m));
            }
            widths.push(s[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatCols(parts.to_vec()), vec![m, n], out, Vec::new(), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(dim_err!("row slice {}..{} of {:?}", start, start + len, s));
        }
        let n = s[1];
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        self.push(Op::SliceRows { x: a, start }, vec![len, n], out, Vec::new(), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rc(parts[0]).1;
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if c != n {
                return Err(dim_err!("row concat of {:?} with width {}", self.shape(p), n));
            }
            m += r;
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), vec![m, n], out, Vec::new(), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Op::Sum(a), Vec::new(), vec![s], Vec::new(), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len());
        let ng = self.ng(a);
        self.push(Op::Mean(a), Vec::new(), vec![s], Vec::new(), ng)
    }

    /// Mean of squared differences `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gy = match &node.op {
                Op::Input | Op::Param(_) => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &gy, &mut grads);
        }
        Ok(Gradients {
            grads,
            param_nodes: self.bound.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    let mut bt = vec![T::ZERO; k * n];
                    kernels::transpose(self.value(*b), &mut bt, k, n);
                    kernels::matmul_acc(gy, &bt, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a), gy, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        for (x, &d) in g.iter_mut().zip(gy) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    for (x, &d) in g.iter_mut().zip(gy) {
                        *x += d;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for (x, &d) in g.iter_mut().zip(gy) {
                        *x -= d;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(self.value(*b)) {
                        *x += d * o;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((x, &d), &o) in g.iter_mut().zip(gy).zip(self.value(*a)) {
                        *x += d * o;
                    }
                }
            }
            Op::Scale(a, s) => {
                let st = T::from_f64(*s);
                if let Some(g) = self.acc(grads, *a) {
                    for (x, &d) in g.iter_mut().zip(gy) {
                        *x += d * st;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(g) = self.acc(grads, *a) {
                    for (x, &d) in g.iter_mut().zip(gy) {
                        *x += d;
                    }
                }
                let n = self.value(*row).len();
                if let Some(g) = self.acc(grads, *row) {
                    for chunk in gy.chunks(n) {
                        for (x, &d) in g.iter_mut().zip(chunk) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    for ((x, &d), &v) in g.iter_mut().zip(gy).zip(self.value(*a)) {
                        *x += d * gelu_grad(v);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().unwrap_or(&1);
                let y = &node.value;
                if let Some(g) = self.acc(grads, *a) {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gy.chunks(n)) {
                        let dot = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>();
                        for ((x, &yy), &d) in gr.iter_mut().zip(yr).zip(dr) {
                            *x += yy * (d - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let n = *node.shape.last().unwrap_or(&1);
                let m = node.value.len() / n;
                let (xhat, invs) = node.aux.split_at(m * n);
                if let Some(gg) = self.acc(grads, *gain) {
                    for (xr, dr) in xhat.chunks(n).zip(gy.chunks(n)) {
                        for ((x, &xh), &d) in gg.iter_mut().zip(xr).zip(dr) {
                            *x += d * xh;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for dr in gy.chunks(n) {
                        for (x, &d) in gb.iter_mut().zip(dr) {
                            *x += d;
                        }
                    }
                }
                let gain_v = self.value(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    let nt = T::from_usize(n);
                    let mut dxh = vec![T::ZERO; n];
                    for r in 0..m {
                        let xr = &xhat[r * n..(r + 1) * n];
                        let dr = &gy[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxh[j] = dr[j] * gain_v[j];
                        }
                        let s1 = dxh.iter().copied().sum::<T>();
                        let s2 = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                        let scale = invs[r] / nt;
                        for j in 0..n {
                            gx[r * n + j] += scale * (nt * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (l, cin, cout, k) = (sx[0], sx[1], sw[0], sw[2]);
                let lout = node.shape[0];
                let kc = k * cin;
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for dr in gy.chunks(cout) {
                            for (x, &d) in gb.iter_mut().zip(dr) {
                                *x += d;
                            }
                        }
                    }
                }
                if self.ng(*w) {
                    let cols = kernels::im2col(self.value(*x), l, cin, k, *pad, lout);
                    let mut dw2 = vec![T::ZERO; kc * cout];
                    kernels::matmul_tn_acc(&cols, gy, &mut dw2, lout, kc, cout);
                    let gw = self.acc(grads, *w).expect("weight needs grad");
                    for co in 0..cout {
                        for ci in 0..cin {
                            for kk in 0..k {
                                gw[(co * cin + ci) * k + kk] += dw2[(kk * cin + ci) * cout + co];
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    // W2^T is [cout x kc]
                    let w2t = kernels::conv_weight_matrix_t(self.value(*w), cout, cin, k);
                    let mut dcols = vec![T::ZERO; lout * kc];
                    kernels::matmul_acc(gy, &w2t, &mut dcols, lout, cout, kc);
                    let gx = self.acc(grads, *x).expect("input needs grad");
                    kernels::col2im_acc(&dcols, gx, l, cin, k, *pad, lout);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if let Some(g) = self.acc(grads, *a) {
                    // y is [n x m] = a^T, a is [m x n]
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let len = node.shape[1];
                if let Some(g) = self.acc(grads, *x) {
                    for (i, dr) in gy.chunks(len).enumerate() {
                        for (x, &d) in g[i * n + start..i * n + start + len].iter_mut().zip(dr) {
                            *x += d;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(g) = self.acc(grads, p) {
                        for (i, gr) in g.chunks_mut(w).enumerate() {
                            for (x, &d) in gr.iter_mut().zip(&gy[i * n + off..i * n + off + w]) {
                                *x += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                if let Some(g) = self.acc(grads, *x) {
                    for (x, &d) in g[start * n..start * n + gy.len()].iter_mut().zip(gy) {
                        *x += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(g) = self.acc(grads, p) {
                        for (x, &d) in g.iter_mut().zip(&gy[off..off + len]) {
                            *x += d;
                        }
                    }
                    off += len;
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.acc(grads, *a) {
                    for x in g.iter_mut() {
                        *x += gy[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).len());
                if let Some(g) = self.acc(grads, *a) {
                    let d = gy[0] / n;
                    for x in g.iter_mut() {
                        *x += d;
                    }
                }
            }
        }
    }
}

/// Result of a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    param_nodes: Vec<Option<Var>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf (input with `requires_grad` or parameter).
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for parameter `idx` of the bound store, if it was used.
    pub fn param(&self, idx: usize) -> Option<&[T]> {
        self.param_nodes
            .get(idx)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// Adds every parameter gradient into `acc` (index-aligned with the store).
    pub fn accumulate_into(&self, acc: &mut [Vec<T>]) {
        for (idx, slot) in acc.iter_mut().enumerate() {
            if let Some(g) = self.param(idx) {
                for (a, &b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    /// Takes ownership of the per-parameter gradients, zero-filled where unused.
    pub fn into_param_grads(mut self, params: &LayerParams<T>) -> Vec<Vec<T>> {
        let mut out = Vec::with_capacity(params.len());
        for idx in 0..params.len() {
            let g = self.param_nodes[idx]
                .and_then(|v| mem::take(&mut self.grads[v.0]))
                .unwrap_or_else(|| vec![T::ZERO; params.get_index(idx).numel()]);
            out.push(g);
        }
        out
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Conv1d { .. } => "conv1d",
        Op::Transpose(_) => "transpose",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
    }
}

/// Dense kernels. All reductions run sequentially over the flat index.
pub(crate) mod kernels {
    use alloc::vec;
    use alloc::vec::Vec;

    use crate::real::Real;

    /// `out[m x n] += a[m x k] * b[k x n]`
    pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == T::ZERO {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out[k x n] += a[m x k]^T * b[m x n]`
    pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::ZERO {
                    continue;
                }
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn transpose<T: Real>(a: &[T], out: &mut [T], m: usize, n: usize) {
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
    }

    /// `[lout x (k*cin)]` patch matrix; column `kk*cin + ci` holds `x[l + kk - pad, ci]`.
    pub fn im2col<T: Real>(x: &[T], l: usize, cin: usize, k: usize, pad: usize, lout: usize) -> Vec<T> {
        let kc = k * cin;
        let mut cols = vec![T::ZERO; lout * kc];
        for o in 0..lout {
            for kk in 0..k {
                let src = o + kk;
                if src < pad || src - pad >= l {
                    continue;
                }
                let s = src - pad;
                cols[o * kc + kk * cin..o * kc + (kk + 1) * cin].copy_from_slice(&x[s * cin..(s + 1) * cin]);
            }
        }
        cols
    }

    pub fn col2im_acc<T: Real>(dcols: &[T], dx: &mut [T], l: usize, cin: usize, k: usize, pad: usize, lout: usize) {
        let kc = k * cin;
        for o in 0..lout {
            for kk in 0..k {
                let src = o + kk;
                if src < pad || src - pad >= l {
                    continue;
                }
                let s = src - pad;
                for (d, &g) in dx[s * cin..(s + 1) * cin]
                    .iter_mut()
                    .zip(&dcols[o * kc + kk * cin..o * kc + (kk + 1) * cin])
                {
                    *d += g;
                }
            }
        }
    }

    /// `[(k*cin) x cout]` with entry `(kk*cin + ci, co) = w[co, ci, kk]`.
    pub fn conv_weight_matrix<T: Real>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
        let mut out = vec![T::ZERO; k * cin * cout];
        for co in 0..cout {
            for ci in 0..cin {
                for kk in 0..k {
                    out[(kk * cin + ci) * cout + co] = w[(co * cin + ci) * k + kk];
                }
            }
        }
        out
    }

    pub fn conv_weight_matrix_t<T: Real>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
        let kc = k * cin;
        let mut out = vec![T::ZERO; cout * kc];
        for co in 0..cout {
            for ci in 0..cin {
                for kk in 0..k {
                    out[co * kc + kk * cin + ci] = w[(co * cin + ci) * k + kk];
                }
            }
        }
        out
    }
}
