//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! A [`Tape`] records every forward operation of one training step as an
//! append-only node list; parents always precede children, so the backward
//! pass is a single reverse sweep that visits each node exactly once. The
//! tape is discarded after the step; persistent parameters live in a
//! [`crate::params::ParamStore`] and are bound to tape leaves per step.
//!
//! Gradient accumulation contract: `backward` *adds* into node gradient
//! buffers. Calling it twice without zeroing doubles leaf gradients.

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor;

/// Handle to a node on a specific tape. Only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    AddBias { x: usize, bias: usize, axis: usize },
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    ExpandBatch { x: usize },
    BroadcastAxis { x: usize, axis: usize },
    SwapLast2 { x: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape { x: usize },
    SumAll { x: usize },
    SumAxis { x: usize, axis: usize },
    MeanAxis { x: usize, axis: usize },
    MaxAxis { x: usize, axis: usize, argmax: Vec<usize> },
    Sigmoid { x: usize },
    LeakyRelu { x: usize, slope: f32 },
    Log { x: usize },
    Softplus { x: usize },
    Conv1x1 { x: usize, w: usize, bias: Option<usize> },
    GlobalPool { x: usize, mode: PoolMode, argmax: Vec<usize> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// c[m×n] += a[m×k]·b[k×n], accumulating over k in ascending order.
fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// da[m×k] += g[m×n]·bᵀ where b is [k×n].
fn matmul_grad_lhs(da: &mut [f32], g: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dav) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *dav += s;
        }
    }
}

/// db[k×n] += aᵀ·g where a is [m×k], g is [m×n].
fn matmul_grad_rhs(db: &mut [f32], a: &[f32], g: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &gv) in dbrow.iter_mut().zip(grow) {
                *dbv += av * gv;
            }
        }
    }
}

fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Split a shape into (outer, extent-at-axis, inner) products.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

fn sigmoid_f(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_f(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant or input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a leaf bound to a persistent parameter, so its gradient can be
    /// exported back to the store after `backward`.
    pub fn leaf_param(&mut self, value: Tensor, id: ParamId) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    /// Leaf nodes bound to parameters, with their accumulated gradients.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.nodes.iter().filter_map(|n| match (n.param, &n.grad) {
            (Some(id), Some(g)) => Some((id, g.as_slice())),
            _ => None,
        })
    }

    // ── Elementwise and algebra ──────────────────────────────────────

    fn require_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("add", a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("sub", a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_same_shape("mul", a, b)?;
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let data: Vec<f32> = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(value, Op::Scale { a: a.0, c })
    }

    /// Broadcast-add a 1-D bias along `axis` of `x` (all other axes repeat).
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(Error::shape("add_bias", &xs, &bs));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.nodes[x.0].value.data();
        let bd = self.nodes[bias.0].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[base + i] = xd[base + i] + bd[k];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
                axis,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asr, bsr) = (self.shape(a), self.shape(b));
        if asr.len() != 2 || bsr.len() != 2 || asr[1] != bsr[0] {
            return Err(Error::shape("matmul", asr, bsr));
        }
        let (m, k, n) = (asr[0], asr[1], bsr[1]);
        let mut out = vec![0.0f32; m * n];
        matmul_acc(
            &mut out,
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0 }))
    }

    /// Batched matrix product: [B×m×k]·[B×k×n] → [B×m×n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asr, bsr) = (self.shape(a), self.shape(b));
        if asr.len() != 3 || bsr.len() != 3 || asr[0] != bsr[0] || asr[2] != bsr[1] {
            return Err(Error::shape("bmm", asr, bsr));
        }
        let (bsz, m, k, n) = (asr[0], asr[1], asr[2], bsr[2]);
        let mut out = vec![0.0f32; bsz * m * n];
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        for s in 0..bsz {
            matmul_acc(
                &mut out[s * m * n..(s + 1) * m * n],
                &ad[s * m * k..(s + 1) * m * k],
                &bd[s * k * n..(s + 1) * k * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a: a.0, b: b.0 }))
    }

    /// Repeat a tensor along a new leading batch axis. Backward sums over it.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        if batch == 0 {
            return Err(Error::Contract("expand_batch: batch must be >= 1".into()));
        }
        let xd = self.nodes[x.0].value.data();
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let mut out = Vec::with_capacity(xd.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(xd);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::ExpandBatch { x: x.0 }))
    }

    /// Repeat a length-1 axis `n` times. Backward sums over the axis.
    pub fn broadcast_axis(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || xs[axis] != 1 {
            return Err(Error::Contract(format!(
                "broadcast_axis: axis {} of {:?} must have extent 1",
                axis, xs
            )));
        }
        let (outer, _, inner) = axis_split(&xs, axis);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; outer * n * inner];
        for o in 0..outer {
            let src = &xd[o * inner..(o + 1) * inner];
            for k in 0..n {
                out[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(src);
            }
        }
        let mut shape = xs;
        shape[axis] = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::BroadcastAxis { x: x.0, axis }))
    }

    /// Swap the last two axes; leading axes are treated as batch.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Contract(format!(
                "transpose: rank must be >= 2, got {:?}",
                xs
            )));
        }
        let (r, c) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let batch: usize = xs[..xs.len() - 2].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xd.len()];
        for s in 0..batch {
            let src = &xd[s * r * c..(s + 1) * r * c];
            let dst = &mut out[s * r * c..(s + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = xs;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SwapLast2 { x: x.0 }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat: axis {} out of range for {:?}",
                axis, first
            )));
        }
        let mut total = 0usize;
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != first.len()
                || ps
                    .iter()
                    .enumerate()
                    .any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(Error::shape("concat", &first, ps));
            }
            total += ps[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0f32; outer * total * inner];
        for o in 0..outer {
            let mut off = 0usize;
            for &p in parts {
                let pn = self.shape(p)[axis];
                let pd = self.nodes[p.0].value.data();
                let src = &pd[o * pn * inner..(o + 1) * pn * inner];
                let dst_base = (o * total + off) * inner;
                out[dst_base..dst_base + pn * inner].copy_from_slice(src);
                off += pn;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f32 = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f32)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Contract(format!(
                "sum_axis: axis {} out of range for {:?}",
                axis, xs
            )));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let value = Tensor::new(reduced_shape(&xs, axis), out)?;
        Ok(self.push(value, Op::SumAxis { x: x.0, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Contract(format!(
                "mean_axis: axis {} out of range for {:?}",
                axis, xs
            )));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.nodes[x.0].value.data();
        let inv = 1.0 / n as f32;
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i] * inv;
                }
            }
        }
        let value = Tensor::new(reduced_shape(&xs, axis), out)?;
        Ok(self.push(value, Op::MeanAxis { x: x.0, axis }))
    }

    /// Max over an axis. Ties route the gradient to the first maximal
    /// position in row-major order.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::Contract(format!(
                "max_axis: axis {} out of range for {:?}",
                axis, xs
            )));
        }
        let (outer, n, inner) = axis_split(&xs, axis);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    let v = xd[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let value = Tensor::new(reduced_shape(&xs, axis), out)?;
        Ok(self.push(
            value,
            Op::MaxAxis {
                x: x.0,
                axis,
                argmax,
            },
        ))
    }

    // ── Activations ──────────────────────────────────────────────────

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| sigmoid_f(v))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        self.push(value, Op::Sigmoid { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let data: Vec<f32> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        self.push(value, Op::LeakyRelu { x: x.0, slope })
    }

    pub fn log(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.nodes[x.0].value.data().iter().map(|v| v.ln()).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        self.push(value, Op::Log { x: x.0 })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| softplus_f(v))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).unwrap();
        self.push(value, Op::Softplus { x: x.0 })
    }

    // ── Structured ops ───────────────────────────────────────────────

    /// Per-position linear map over channels: x[B×D×H×W], w[D'×D] → [B×D'×H×W].
    /// Equals a matrix product on the flattened spatial view, bitwise.
    pub fn conv1x1(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("conv1x1", &xs, &ws));
        }
        let (bsz, d_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let d_out = ws[0];
        let hw = h * wd;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != 1 || bs[0] != d_out {
                return Err(Error::shape("conv1x1 bias", &ws, bs));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let wdat = self.nodes[w.0].value.data();
        let mut out = vec![0.0f32; bsz * d_out * hw];
        for s in 0..bsz {
            matmul_acc(
                &mut out[s * d_out * hw..(s + 1) * d_out * hw],
                wdat,
                &xd[s * d_in * hw..(s + 1) * d_in * hw],
                d_out,
                d_in,
                hw,
            );
        }
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for s in 0..bsz {
                for c in 0..d_out {
                    let base = (s * d_out + c) * hw;
                    for p in 0..hw {
                        out[base + p] += bd[c];
                    }
                }
            }
        }
        let value = Tensor::new(vec![bsz, d_out, h, wd], out)?;
        Ok(self.push(
            value,
            Op::Conv1x1 {
                x: x.0,
                w: w.0,
                bias: bias.map(|b| b.0),
            },
        ))
    }

    /// Spatial mean or max per channel: [B×C×H×W] → [B×C]. Max ties route
    /// the gradient to the first maximal position in row-major order.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Contract(format!(
                "global_pool: rank-4 input required, got {:?}",
                xs
            )));
        }
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; bsz * c];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                let inv = 1.0 / hw as f32;
                for (i, slot) in out.iter_mut().enumerate() {
                    let base = i * hw;
                    let mut s = 0.0;
                    for p in 0..hw {
                        s += xd[base + p];
                    }
                    *slot = s * inv;
                }
            }
            PoolMode::Max => {
                argmax = vec![0usize; bsz * c];
                for (i, slot) in out.iter_mut().enumerate() {
                    let base = i * hw;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_p = 0;
                    for p in 0..hw {
                        if xd[base + p] > best {
                            best = xd[base + p];
                            best_p = p;
                        }
                    }
                    *slot = best;
                    argmax[i] = base + best_p;
                }
            }
        }
        let value = Tensor::new(vec![bsz, c], out)?;
        Ok(self.push(
            value,
            Op::GlobalPool {
                x: x.0,
                mode,
                argmax,
            },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a one-element loss node. Gradients are *added*
    /// into node buffers; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut g: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            self.backprop_node(i, &gi, &mut g);
            match &mut self.nodes[i].grad {
                Some(buf) => add_assign(buf, &gi),
                slot @ None => *slot = Some(gi),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gi: &[f32], g: &mut [Option<Vec<f32>>]) {
        // Fetch-or-create the scratch gradient buffer for a parent node.
        macro_rules! gbuf {
            ($g:expr, $idx:expr) => {{
                if $g[$idx].is_none() {
                    $g[$idx] = Some(vec![0.0; self.nodes[$idx].value.numel()]);
                }
                $g[$idx].as_mut().unwrap()
            }};
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                add_assign(gbuf!(g, *a), gi);
                add_assign(gbuf!(g, *b), gi);
            }
            Op::Sub { a, b } => {
                add_assign(gbuf!(g, *a), gi);
                let gb = gbuf!(g, *b);
                for (d, s) in gb.iter_mut().zip(gi) {
                    *d -= s;
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                {
                    let ga = gbuf!(g, *a);
                    for ((d, s), bv) in ga.iter_mut().zip(gi).zip(bd) {
                        *d += s * bv;
                    }
                }
                let gb = gbuf!(g, *b);
                for ((d, s), av) in gb.iter_mut().zip(gi).zip(ad) {
                    *d += s * av;
                }
            }
            Op::Scale { a, c } => {
                let ga = gbuf!(g, *a);
                for (d, s) in ga.iter_mut().zip(gi) {
                    *d += s * c;
                }
            }
            Op::AddBias { x, bias, axis } => {
                add_assign(gbuf!(g, *x), gi);
                let (outer, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let gb = gbuf!(g, *bias);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for p in 0..inner {
                            gb[k] += gi[base + p];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[*b].value.shape()[1];
                let bd = self.nodes[*b].value.data();
                let ad = self.nodes[*a].value.data();
                matmul_grad_lhs(gbuf!(g, *a), gi, bd, m, k, n);
                matmul_grad_rhs(gbuf!(g, *b), ad, gi, m, k, n);
            }
            Op::Bmm { a, b } => {
                let (bsz, m, k) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1], s[2])
                };
                let n = self.nodes[*b].value.shape()[2];
                let ad = self.nodes[*a].value.data();
                let bd = self.nodes[*b].value.data();
                {
                    let ga = gbuf!(g, *a);
                    for s in 0..bsz {
                        matmul_grad_lhs(
                            &mut ga[s * m * k..(s + 1) * m * k],
                            &gi[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                let gb = gbuf!(g, *b);
                for s in 0..bsz {
                    matmul_grad_rhs(
                        &mut gb[s * k * n..(s + 1) * k * n],
                        &ad[s * m * k..(s + 1) * m * k],
                        &gi[s * m * n..(s + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Op::ExpandBatch { x } => {
                let numel = self.nodes[*x].value.numel();
                let gx = gbuf!(g, *x);
                for (j, s) in gi.iter().enumerate() {
                    gx[j % numel] += s;
                }
            }
            Op::BroadcastAxis { x, axis } => {
                let (outer, _, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let n = self.nodes[i].value.shape()[*axis];
                let gx = gbuf!(g, *x);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for p in 0..inner {
                            gx[o * inner + p] += gi[base + p];
                        }
                    }
                }
            }
            Op::SwapLast2 { x } => {
                // out has shape [..., c, r]; transpose gi back to [..., r, c]
                let os = self.nodes[i].value.shape();
                let (c, r) = (os[os.len() - 2], os[os.len() - 1]);
                let batch: usize = os[..os.len() - 2].iter().product();
                let gx = gbuf!(g, *x);
                for s in 0..batch {
                    let src = &gi[s * r * c..(s + 1) * r * c];
                    let dst = &mut gx[s * r * c..(s + 1) * r * c];
                    for ii in 0..c {
                        for jj in 0..r {
                            dst[jj * c + ii] += src[ii * r + jj];
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let os = self.nodes[i].value.shape();
                let (outer, total, inner) = axis_split(os, *axis);
                let mut off = 0usize;
                for &p in parts {
                    let pn = self.nodes[p].value.shape()[*axis];
                    let gp = gbuf!(g, p);
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * pn * inner;
                        add_assign(&mut gp[dst..dst + pn * inner], &gi[src..src + pn * inner]);
                    }
                    off += pn;
                }
            }
            Op::Reshape { x } => {
                add_assign(gbuf!(g, *x), gi);
            }
            Op::SumAll { x } => {
                let gx = gbuf!(g, *x);
                for d in gx.iter_mut() {
                    *d += gi[0];
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let gx = gbuf!(g, *x);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for p in 0..inner {
                            gx[base + p] += gi[o * inner + p];
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                let inv = 1.0 / n as f32;
                let gx = gbuf!(g, *x);
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for p in 0..inner {
                            gx[base + p] += gi[o * inner + p] * inv;
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax, .. } => {
                let gx = gbuf!(g, *x);
                for (out_idx, &src) in argmax.iter().enumerate() {
                    gx[src] += gi[out_idx];
                }
            }
            Op::Sigmoid { x } => {
                let yd = self.nodes[i].value.data();
                let gx = gbuf!(g, *x);
                for ((d, s), y) in gx.iter_mut().zip(gi).zip(yd) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.nodes[*x].value.data();
                let gx = gbuf!(g, *x);
                for ((d, s), &v) in gx.iter_mut().zip(gi).zip(xd) {
                    *d += s * if v >= 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Log { x } => {
                let xd = self.nodes[*x].value.data();
                let gx = gbuf!(g, *x);
                for ((d, s), &v) in gx.iter_mut().zip(gi).zip(xd) {
                    *d += s / v;
                }
            }
            Op::Softplus { x } => {
                let xd = self.nodes[*x].value.data();
                let gx = gbuf!(g, *x);
                for ((d, s), &v) in gx.iter_mut().zip(gi).zip(xd) {
                    *d += s * sigmoid_f(v);
                }
            }
            Op::Conv1x1 { x, w, bias } => {
                let xs = self.nodes[*x].value.shape();
                let (bsz, d_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let d_out = self.nodes[*w].value.shape()[0];
                let hw = h * wd;
                let xd = self.nodes[*x].value.data();
                let wdat = self.nodes[*w].value.data();
                {
                    // dW += Σ_b g_b · x_bᵀ
                    let gw = gbuf!(g, *w);
                    for s in 0..bsz {
                        matmul_grad_lhs(
                            gw,
                            &gi[s * d_out * hw..(s + 1) * d_out * hw],
                            &xd[s * d_in * hw..(s + 1) * d_in * hw],
                            d_out,
                            d_in,
                            hw,
                        );
                    }
                }
                {
                    // dX_b += Wᵀ · g_b
                    let gx = gbuf!(g, *x);
                    for s in 0..bsz {
                        matmul_grad_rhs(
                            &mut gx[s * d_in * hw..(s + 1) * d_in * hw],
                            wdat,
                            &gi[s * d_out * hw..(s + 1) * d_out * hw],
                            d_out,
                            d_in,
                            hw,
                        );
                    }
                }
                if let Some(b) = bias {
                    let gb = gbuf!(g, *b);
                    for s in 0..bsz {
                        for c in 0..d_out {
                            let base = (s * d_out + c) * hw;
                            for p in 0..hw {
                                gb[c] += gi[base + p];
                            }
                        }
                    }
                }
            }
            Op::GlobalPool { x, mode, argmax } => {
                let xs = self.nodes[*x].value.shape();
                let hw = xs[2] * xs[3];
                let gx = gbuf!(g, *x);
                match mode {
                    PoolMode::Avg => {
                        let inv = 1.0 / hw as f32;
                        for (out_idx, s) in gi.iter().enumerate() {
                            let base = out_idx * hw;
                            for p in 0..hw {
                                gx[base + p] += s * inv;
                            }
                        }
                    }
                    PoolMode::Max => {
                        for (out_idx, &src) in argmax.iter().enumerate() {
                            gx[src] += gi[out_idx];
                        }
                    }
                }
            }
        }
    }

    /// Smallest distance of any recorded non-smooth op to its kink: min
    /// |input| over LeakyReLU entries and min top-2 gap over max reductions.
    /// Finite-difference checks are only valid when this margin exceeds the
    /// probe step.
    pub fn kink_margin(&self) -> f32 {
        let mut margin = f32::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    for &v in self.nodes[*x].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxAxis { x, axis, .. } => {
                    let (outer, n, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                    let xd = self.nodes[*x].value.data();
                    for o in 0..outer {
                        for p in 0..inner {
                            let mut top = f32::NEG_INFINITY;
                            let mut second = f32::NEG_INFINITY;
                            for k in 0..n {
                                let v = xd[(o * n + k) * inner + p];
                                if v > top {
                                    second = top;
                                    top = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                            if second.is_finite() {
                                margin = margin.min(top - second);
                            }
                        }
                    }
                }
                Op::GlobalPool {
                    x,
                    mode: PoolMode::Max,
                    ..
                } => {
                    let xs = self.nodes[*x].value.shape();
                    let hw = xs[2] * xs[3];
                    let xd = self.nodes[*x].value.data();
                    for row in 0..xs[0] * xs[1] {
                        let mut top = f32::NEG_INFINITY;
                        let mut second = f32::NEG_INFINITY;
                        for p in 0..hw {
                            let v = xd[row * hw + p];
                            if v > top {
                                second = top;
                                top = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        if second.is_finite() {
                            margin = margin.min(top - second);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}
