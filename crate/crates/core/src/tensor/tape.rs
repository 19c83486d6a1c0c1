use std::sync::Arc;

use super::kernels::{self, Dims4, Kernel5};
use super::{numel, strides, Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Sin(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    /// Elementwise function; the derivative at each element is saved.
    Map(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    Reshape(Var),
    Slice { src: Var, axis: usize, start: usize },
    Pad { src: Var, axis: usize, before: usize },
    Concat { a: Var, b: Var, axis: usize },
    Gather { src: Var, indices: Arc<Vec<usize>> },
    Dense { w: Var, x: Var, b: Option<Var> },
    Conv3d { x: Var, w: Var, b: Option<Var> },
    ConvTranspose3d { x: Var, w: Var, b: Option<Var> },
    Upsample2(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed primitive operations.
///
/// Operations evaluate eagerly when recorded, so building the tape is the
/// forward pass. Nodes are appended in execution order, which is a
/// topological order. [`Tape::backward`] may run once per tape.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

/// Gradients indexed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `src` viewed under the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(src);
    let off = out.len() - src.len();
    (0..out.len())
        .map(|i| {
            if i < off || src[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` over every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let n = numel(out);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped `out`) down to the broadcast source shape `src`.
fn reduce_to(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if out == src {
        return g.to_vec();
    }
    let mut r = vec![0.0; numel(src)];
    let s = broadcast_strides(src, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, i, _| r[i] += g[o]);
    r
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(Precision::default())
    }
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            precision,
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(!self.consumed, "recording on a consumed tape");
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf (latent vector, parameter).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise binary (numpy-style broadcasting) ----

    fn binary(&mut self, a: Var, b: Var, kind: Bin) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or(Error::Shape {
            op: kind.name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| kind.apply(x, y)).collect()
        } else {
            let mut d = vec![0.0; numel(&out)];
            let st_a = broadcast_strides(&sa, &out);
            let st_b = broadcast_strides(&sb, &out);
            for_each_broadcast(&out, &st_a, &st_b, |o, i, j| d[o] = kind.apply(va[i], vb[j]));
            d
        };
        let op = match kind {
            Bin::Add => Op::Add(a, b),
            Bin::Sub => Op::Sub(a, b),
            Bin::Mul => Op::Mul(a, b),
            Bin::Div => Op::Div(a, b),
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(out, data), op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Bin::Div)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |v| -v, Op::Neg(a))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| c * v, Op::Scale(a, c))
    }
    /// `a + c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |v| v + c, Op::Offset(a))
    }
    /// `c * a + d`.
    pub fn affine(&mut self, a: Var, c: f64, d: f64) -> Var {
        let s = self.scale(a, c);
        self.offset(s, d)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |v| if v >= 0.0 { v } else { slope * v }, Op::LeakyRelu(a, slope))
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }
    /// Absolute value; the derivative at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise `f`, which returns `(value, derivative)`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> (f64, f64)) -> Var {
        let src = self.value(a);
        let mut vals = Vec::with_capacity(src.numel());
        let mut ders = Vec::with_capacity(src.numel());
        for &v in src.data() {
            let (y, dy) = f(v);
            vals.push(y);
            ders.push(dy);
        }
        let t = Tensor::from_parts(src.shape().to_vec(), vals);
        let ng = self.ng(a);
        self.push(t, Op::Map(a, ders), ng)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    // ---- shape manipulation ----

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(out) if out == shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "broadcast",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let src = self.value(a).data();
        let st = broadcast_strides(&sa, shape);
        let zeros = vec![0; shape.len()];
        let mut d = vec![0.0; numel(shape)];
        for_each_broadcast(shape, &st, &zeros, |o, i, _| d[o] = src[i]);
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), d), Op::Broadcast(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// `len` entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || len == 0 || start + len > sa[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: sa,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = Self::axis_split(&sa, axis);
        let src = self.value(a).data();
        let mut d = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            d.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, d), Op::Slice { src: a, axis, start }, ng))
    }

    /// Pads `axis` with `before`/`after` entries holding `fill`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize, fill: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Shape {
                op: "pad",
                lhs: sa,
                rhs: vec![axis],
            });
        }
        let (outer, n, inner) = Self::axis_split(&sa, axis);
        let m = n + before + after;
        let src = self.value(a).data();
        let mut d = vec![fill; outer * m * inner];
        for o in 0..outer {
            let sb = o * n * inner;
            let db = (o * m + before) * inner;
            d[db..db + n * inner].copy_from_slice(&src[sb..sb + n * inner]);
        }
        let mut shape = sa;
        shape[axis] = m;
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_parts(shape, d), Op::Pad { src: a, axis, before }, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && (0..sa.len()).all(|i| i == axis || sa[i] == sb[i]);
        if !compatible {
            return Err(Error::Shape {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, na, inner) = Self::axis_split(&sa, axis);
        let nb = sb[axis];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut d = Vec::with_capacity(outer * (na + nb) * inner);
        for o in 0..outer {
            d.extend_from_slice(&va[o * na * inner..(o + 1) * na * inner]);
            d.extend_from_slice(&vb[o * nb * inner..(o + 1) * nb * inner]);
        }
        let mut shape = sa;
        shape[axis] = na + nb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(shape, d), Op::Concat { a, b, axis }, ng))
    }

    /// Picks elements by flat index into a one-dimensional tensor.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let src = self.value(a);
        if indices.is_empty() {
            return Err(Error::invalid("gather: empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.numel()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: src.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let d: Vec<f64> = indices.iter().map(|&i| src.data()[i]).collect();
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_vec(d), Op::Gather { src: a, indices }, ng))
    }

    // ---- layers ----

    /// `W x + b` with `W: [out, in]`; `x` is `[in]` or a batch `[n, in]`.
    pub fn dense(&mut self, w: Var, x: Var, b: Option<Var>) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sx = self.shape(x).to_vec();
        let (rows, n_in) = match sx.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => (0, 0),
        };
        if sw.len() != 2 || rows == 0 || sw[1] != n_in {
            return Err(Error::Shape {
                op: "dense",
                lhs: sw,
                rhs: sx,
            });
        }
        let n_out = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return Err(Error::Shape {
                    op: "dense bias",
                    lhs: vec![n_out],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let wv = self.value(w).data();
        let xv = self.value(x).data();
        let bv = b.map(|b| self.value(b).data());
        let mut d = vec![0.0; rows * n_out];
        for r in 0..rows {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            for o in 0..n_out {
                let wr = &wv[o * n_in..(o + 1) * n_in];
                let mut acc: f64 = wr.iter().zip(xr).map(|(a, c)| a * c).sum();
                if let Some(bv) = bv {
                    acc += bv[o];
                }
                d[r * n_out + o] = acc;
            }
        }
        let shape = if sx.len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        let ng = self.ng(w) || self.ng(x) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(shape, d), Op::Dense { w, x, b }, ng))
    }

    fn check_conv(&self, name: &'static str, x: Var, w: Var, b: Option<Var>, transposed: bool) -> Result<()> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let cin_axis = if transposed { 0 } else { 1 };
        let cout = if transposed { sw.get(1) } else { sw.first() }.copied();
        let ok = sx.len() == 4
            && sw.len() == 5
            && sw[cin_axis] == sx[0]
            && (transposed || sw[2..].iter().all(|k| k % 2 == 1));
        if !ok {
            return Err(Error::Shape {
                op: name,
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b).len() != 1 || Some(self.shape(b)[0]) != cout {
                return Err(Error::Shape {
                    op: name,
                    lhs: sw.to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        Ok(())
    }

    /// 3D convolution, stride 1, zero "same" padding, odd kernel extents.
    /// `x: [ci, z, y, x]`, `w: [co, ci, kz, ky, kx]`, optional `b: [co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_conv("conv3d", x, w, b, false)?;
        let d = Dims4::from_shape(self.shape(x));
        let k = Kernel5::from_shape(self.shape(w));
        let out = kernels::conv3d(
            self.value(x).data(),
            d,
            self.value(w).data(),
            k,
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![k.co, d.z, d.y, d.x];
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Conv3d { x, w, b }, ng))
    }

    /// Stride-2 transposed convolution; doubles each spatial extent.
    /// `x: [ci, z, y, x]`, `w: [ci, co, kz, ky, kx]`, optional `b: [co]`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_conv("conv_transpose3d", x, w, b, true)?;
        let d = Dims4::from_shape(self.shape(x));
        let k = Kernel5::from_shape(self.shape(w));
        let out = kernels::conv_transpose3d(
            self.value(x).data(),
            d,
            self.value(w).data(),
            k,
            b.map(|b| self.value(b).data()),
        );
        let shape = vec![k.ci, 2 * d.z, 2 * d.y, 2 * d.x];
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConvTranspose3d { x, w, b }, ng))
    }

    /// Nearest-neighbour upsampling ×2 along each spatial axis of `[c, z, y, x]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape {
                op: "upsample2",
                lhs: sx,
                rhs: vec![4],
            });
        }
        let d = Dims4::from_shape(&sx);
        let out = kernels::upsample2(self.value(x).data(), d);
        let shape = vec![d.c, 2 * d.z, 2 * d.y, 2 * d.x];
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Upsample2(x), ng))
    }

    // ---- backward ----

    /// Reverse sweep from `output` seeded with `seed` (same shape as the output).
    /// A tape supports a single backward pass.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::Tape("backward before forward: output not recorded".into()));
        }
        if self.shape(output) != seed.shape() {
            return Err(Error::Shape {
                op: "backward seed",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        self.consumed = true;
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let contribs = self.node_backward(i, &g);
            for (v, t) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let y = node.value.data();
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| -> (Var, Tensor) {
            (v, Tensor::from_parts(self.shape(v).to_vec(), data))
        };
        let elementwise = |a: Var, f: &dyn Fn(usize, f64) -> f64| -> Vec<(Var, Tensor)> {
            let xv = self.value(a).data();
            vec![like(a, gd.iter().enumerate().map(|(k, &gv)| gv * f(k, xv[k])).collect())]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                like(*a, reduce_to(gd, out_shape, self.shape(*a))),
                like(*b, reduce_to(gd, out_shape, self.shape(*b))),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                vec![
                    like(*a, reduce_to(gd, out_shape, self.shape(*a))),
                    like(*b, reduce_to(&neg, out_shape, self.shape(*b))),
                ]
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let st_a = broadcast_strides(sa, out_shape);
                let st_b = broadcast_strides(sb, out_shape);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                let (need_a, need_b) = (self.ng(*a), self.ng(*b));
                for_each_broadcast(out_shape, &st_a, &st_b, |o, ia, ib| {
                    if is_div {
                        let inv = 1.0 / vb[ib];
                        if need_a {
                            ga[ia] += gd[o] * inv;
                        }
                        if need_b {
                            gb[ib] -= gd[o] * va[ia] * inv * inv;
                        }
                    } else {
                        if need_a {
                            ga[ia] += gd[o] * vb[ib];
                        }
                        if need_b {
                            gb[ib] += gd[o] * va[ia];
                        }
                    }
                });
                vec![like(*a, ga), like(*b, gb)]
            }
            Op::Neg(a) => vec![like(*a, gd.iter().map(|v| -v).collect())],
            Op::Scale(a, c) => vec![like(*a, gd.iter().map(|v| c * v).collect())],
            Op::Offset(a) => vec![like(*a, gd.to_vec())],
            Op::Tanh(a) => vec![like(*a, gd.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect())],
            Op::Sigmoid(a) => vec![like(*a, gd.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect())],
            Op::LeakyRelu(a, slope) => elementwise(*a, &|_, x| if x >= 0.0 { 1.0 } else { *slope }),
            Op::Sin(a) => elementwise(*a, &|_, x| x.cos()),
            Op::Exp(a) => vec![like(*a, gd.iter().zip(y).map(|(gv, e)| gv * e).collect())],
            Op::Sqrt(a) => vec![like(*a, gd.iter().zip(y).map(|(gv, r)| gv * 0.5 / r).collect())],
            Op::Square(a) => elementwise(*a, &|_, x| 2.0 * x),
            Op::Abs(a) => elementwise(*a, &|_, x| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Map(a, ders) => vec![like(*a, gd.iter().zip(ders).map(|(gv, d)| gv * d).collect())],
            Op::Sum(a) => vec![like(*a, vec![gd[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![like(*a, vec![gd[0] / n as f64; n])]
            }
            Op::Broadcast(a) => vec![like(*a, reduce_to(gd, out_shape, self.shape(*a)))],
            Op::Reshape(a) => vec![like(*a, gd.to_vec())],
            Op::Slice { src, axis, start } => {
                let ss = self.shape(*src);
                let (outer, n, inner) = Self::axis_split(ss, *axis);
                let len = out_shape[*axis];
                let mut d = vec![0.0; numel(ss)];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![like(*src, d)]
            }
            Op::Pad { src, axis, before } => {
                let ss = self.shape(*src);
                let (outer, n, inner) = Self::axis_split(ss, *axis);
                let m = out_shape[*axis];
                let mut d = Vec::with_capacity(numel(ss));
                for o in 0..outer {
                    let b = (o * m + before) * inner;
                    d.extend_from_slice(&gd[b..b + n * inner]);
                }
                vec![like(*src, d)]
            }
            Op::Concat { a, b, axis } => {
                let sa = self.shape(*a);
                let (outer, na, inner) = Self::axis_split(sa, *axis);
                let nb = self.shape(*b)[*axis];
                let mut da = Vec::with_capacity(outer * na * inner);
                let mut db = Vec::with_capacity(outer * nb * inner);
                for o in 0..outer {
                    let base = o * (na + nb) * inner;
                    da.extend_from_slice(&gd[base..base + na * inner]);
                    db.extend_from_slice(&gd[base + na * inner..base + (na + nb) * inner]);
                }
                vec![like(*a, da), like(*b, db)]
            }
            Op::Gather { src, indices } => {
                let mut d = vec![0.0; self.value(*src).numel()];
                for (k, &ix) in indices.iter().enumerate() {
                    d[ix] += gd[k];
                }
                vec![like(*src, d)]
            }
            Op::Dense { w, x, b } => {
                let sw = self.shape(*w);
                let (n_out, n_in) = (sw[0], sw[1]);
                let rows = self.value(*x).numel() / n_in;
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut out = Vec::new();
                if self.ng(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        for o in 0..n_out {
                            let gv = gd[r * n_out + o];
                            for (gxi, wi) in gx[r * n_in..(r + 1) * n_in].iter_mut().zip(&wv[o * n_in..(o + 1) * n_in]) {
                                *gxi += gv * wi;
                            }
                        }
                    }
                    out.push(like(*x, gx));
                }
                if self.ng(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for r in 0..rows {
                        for o in 0..n_out {
                            let gv = gd[r * n_out + o];
                            for (gwi, xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(&xv[r * n_in..(r + 1) * n_in]) {
                                *gwi += gv * xi;
                            }
                        }
                    }
                    out.push(like(*w, gw));
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; n_out];
                    for r in 0..rows {
                        for o in 0..n_out {
                            gb[o] += gd[r * n_out + o];
                        }
                    }
                    out.push(like(*b, gb));
                }
                out
            }
            Op::Conv3d { x, w, b } | Op::ConvTranspose3d { x, w, b } => {
                let d = Dims4::from_shape(self.shape(*x));
                let k = Kernel5::from_shape(self.shape(*w));
                let f = if matches!(node.op, Op::Conv3d { .. }) {
                    kernels::conv3d_backward
                } else {
                    kernels::conv_transpose3d_backward
                };
                let (gx, gw, gb) = f(
                    self.value(*x).data(),
                    d,
                    self.value(*w).data(),
                    k,
                    gd,
                    self.ng(*x),
                    self.ng(*w),
                );
                let mut out = Vec::new();
                if let Some(gx) = gx {
                    out.push(like(*x, gx));
                }
                if let Some(gw) = gw {
                    out.push(like(*w, gw));
                }
                if let Some(b) = b {
                    out.push(like(*b, gb));
                }
                out
            }
            Op::Upsample2(x) => {
                let d = Dims4::from_shape(self.shape(*x));
                vec![like(*x, kernels::upsample2_backward(gd, d))]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
