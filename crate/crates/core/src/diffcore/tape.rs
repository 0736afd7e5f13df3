//! Eager computation tape for reverse-mode differentiation.
//!
//! Every builder method validates shapes, evaluates the primitive immediately
//! and records a node. `backward` replays the tape in reverse, accumulating
//! gradients of a scalar loss into per-parameter buffers. Nodes only ever
//! reference earlier nodes, so the tape is acyclic by construction and a
//! topological order is the insertion order itself.
//!
//! Broadcasting is deliberately narrow: for the binary elementwise ops the
//! right operand must either match the left shape exactly or be a trailing
//! suffix of it (leading axes broadcast). That keeps every backward rule a
//! plain reduction.

use std::sync::Arc;

use crate::diffcore::params::{ParamId, ParamStore};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    /// Constant leaf; never receives gradient.
    Input,
    /// Learnable leaf; gradient routed to the parameter store slot.
    Param(ParamId),
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    /// y = scale * x + shift; only the scale matters to the gradient.
    Affine { scale: f64 },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Reshape,
    /// 2-D row expansion: row i becomes `times` consecutive copies.
    RepeatRows { times: usize },
    /// 2-D tiling: the whole matrix stacked `times` times.
    TileRows { times: usize },
    /// Softmax over the last axis; `mask[j] == false` excludes lane j
    /// (weight exactly zero) in every row.
    Softmax { mask: Option<Arc<Vec<bool>>> },
    Sigmoid,
    Tanh,
    Relu,
    Sum { axis: usize },
    Mean { axis: usize },
    /// sqrt(sum of squares) along `axis`, floored at `floor`.
    L2Norm { axis: usize, floor: f64 },
    MaskedFill { mask: Arc<Vec<bool>> },
    /// Flat gather: out[i] = in[indices[i]].
    Gather { indices: Arc<Vec<usize>> },
    /// out[i, :] = x[i, :] * s[i], differentiable in both operands.
    ScaleRows,
    /// Length-preserving 1-d convolution over [T, C_in] with kernel
    /// [k, C_in, C_out], zero padding (k-1)/2.
    Conv1d,
    /// Normalization over the last axis with learnable gain/bias.
    LayerNorm { eps: f64 },
    SmoothL1,
    /// Mean binary cross-entropy against fixed targets; probabilities are
    /// clamped to [1e-7, 1-1e-7] before the logs.
    BceMean { targets: Arc<Vec<f64>> },
}

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients accumulated by one backward pass, indexed by parameter id.
#[derive(Debug)]
pub struct GradAccum {
    grads: Vec<Option<Tensor>>,
}

impl GradAccum {
    fn new(n: usize) -> Self {
        GradAccum { grads: vec![None; n] }
    }

    fn add(&mut self, pid: ParamId, g: &Tensor) {
        match &mut self.grads[pid.index()] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => self.grads[pid.index()] = Some(g.clone()),
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&Tensor> {
        self.grads[pid.index()].as_ref()
    }

    /// Merge another accumulation into this one (fixed, caller-defined order).
    pub fn merge(&mut self, other: &GradAccum) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => self.grads[i] = Some(g.clone()),
                }
            }
        }
    }

    /// Scale every accumulated gradient in place.
    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Add into the parameter store's gradient buffers. Parameters that were
    /// never reached keep whatever the store already holds (zeros after
    /// `zero_grads`).
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                let slot = store.grad_mut(ParamId::from_index(i));
                for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let needs_grad = matches!(op, Op::Param(_))
            || inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Constant input; does not receive gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    /// Learnable parameter leaf; the current value is copied onto the tape.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> NodeId {
        self.param_count = self.param_count.max(store.len());
        self.push(Op::Param(pid), vec![], store.value(pid).clone())
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0) {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
        let mut out = vec![0.0; m * n];
        mm(va.data(), vb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", v.shape())));
        }
        let (r, c) = (v.dim(0), v.dim(1));
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose, vec![x], value))
    }

    // ── Elementwise binary (suffix broadcast) ────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div, "div", |x, y| x / y)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let reps = broadcast_reps(va.shape(), vb.shape()).ok_or_else(|| {
            Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape()))
        })?;
        let bn = vb.numel();
        let mut out = Vec::with_capacity(va.numel());
        for r in 0..reps {
            let base = r * bn;
            for j in 0..bn {
                out.push(f(va.data()[base + j], vb.data()[j]));
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|t| scale * t + shift).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Affine { scale }, vec![x], value)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    // ── Shape surgery ────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {} of {:?}", axis, first)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", s, first, axis),
                ));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * tail;
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let span = v.dim(axis) * tail;
            for o in 0..outer {
                let src = &v.data()[o * span..(o + 1) * span];
                out[o * out_stride + offset..o * out_stride + offset + span]
                    .copy_from_slice(src);
            }
            offset += span;
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), value))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() || start + len > v.dim(axis) || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, v.shape()),
            ));
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let outer: usize = v.shape()[..axis].iter().product();
        let tail: usize = v.shape()[axis + 1..].iter().product();
        let in_stride = v.dim(axis) * tail;
        let mut out = Vec::with_capacity(outer * len * tail);
        for o in 0..outer {
            let base = o * in_stride + start * tail;
            out.extend_from_slice(&v.data()[base..base + len * tail]);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Slice { axis, start }, vec![x], value))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let value = v.clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 || times == 0 {
            return Err(Error::shape("repeat_rows", format!("{:?} x{}", v.shape(), times)));
        }
        let (r, c) = (v.dim(0), v.dim(1));
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(v.row(i));
            }
        }
        let value = Tensor::new(vec![r * times, c], out)?;
        Ok(self.push(Op::RepeatRows { times }, vec![x], value))
    }

    pub fn tile_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 || times == 0 {
            return Err(Error::shape("tile_rows", format!("{:?} x{}", v.shape(), times)));
        }
        let (r, c) = (v.dim(0), v.dim(1));
        let mut out = Vec::with_capacity(r * times * c);
        for _ in 0..times {
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![r * times, c], out)?;
        Ok(self.push(Op::TileRows { times }, vec![x], value))
    }

    // ── Nonlinearities ───────────────────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. When a mask is given its length must equal
    /// the last extent; `false` lanes receive exactly zero weight.
    pub fn softmax_masked(&mut self, x: NodeId, mask: Option<Arc<Vec<bool>>>) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        let lane = v.dim(v.rank() - 1);
        if let Some(m) = &mask {
            if m.len() != lane {
                return Err(Error::shape(
                    "softmax",
                    format!("mask length {} vs lane {}", m.len(), lane),
                ));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::domain("softmax", "all lanes masked"));
            }
        }
        let mut out = vec![0.0; v.numel()];
        for (orow, irow) in out.chunks_mut(lane).zip(v.data().chunks(lane)) {
            softmax_row(irow, mask.as_deref().map(|m| m.as_slice()), orow);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(Op::Softmax { mask }, vec![x], value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| stable_sigmoid(t)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|t| t.tanh()).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Tanh, vec![x], value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&t| if t > 0.0 { t } else { 0.0 }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::Relu, vec![x], value)
    }

    // ── Reductions ───────────────────────────────────────────────────────

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(x, axis, Op::Sum { axis }, "sum", 1.0)
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let n = {
            let v = self.value(x);
            if axis >= v.rank() {
                return Err(Error::shape("mean", format!("axis {} of {:?}", axis, v.shape())));
            }
            v.dim(axis)
        };
        self.reduce(x, axis, Op::Mean { axis }, "mean", 1.0 / n as f64)
    }

    fn reduce(
        &mut self,
        x: NodeId,
        axis: usize,
        op: Op,
        name: &'static str,
        scale: f64,
    ) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::shape(name, format!("axis {} of {:?}", axis, v.shape())));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let extent = v.dim(axis);
        let tail: usize = v.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * tail];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * tail;
                for t in 0..tail {
                    out[o * tail + t] += v.data()[base + t];
                }
            }
        }
        if scale != 1.0 {
            for t in &mut out {
                *t *= scale;
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(op, vec![x], value))
    }

    pub fn l2_norm(&mut self, x: NodeId, axis: usize, floor: f64) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::shape("l2_norm", format!("axis {} of {:?}", axis, v.shape())));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let extent = v.dim(axis);
        let tail: usize = v.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * tail];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * tail;
                for t in 0..tail {
                    let val = v.data()[base + t];
                    out[o * tail + t] += val * val;
                }
            }
        }
        for t in &mut out {
            *t = t.sqrt().max(floor);
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::L2Norm { axis, floor }, vec![x], value))
    }

    // ── Structured ops ───────────────────────────────────────────────────

    pub fn masked_fill(&mut self, x: NodeId, mask: Arc<Vec<bool>>, value: f64) -> Result<NodeId> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask length {} vs {} entries", mask.len(), v.numel()),
            ));
        }
        let data = v
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&t, &m)| if m { value } else { t })
            .collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskedFill { mask }, vec![x], out))
    }

    pub fn gather(&mut self, x: NodeId, indices: Arc<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::shape(
                "gather",
                format!("index {} out of {} entries", bad, v.numel()),
            ));
        }
        let data: Vec<f64> = indices.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        Ok(self.push(Op::Gather { indices }, vec![x], out))
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vx.rank() != 2 || vs.rank() != 1 || vs.dim(0) != vx.dim(0) {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} rows vs scales {:?}", vx.shape(), vs.shape()),
            ));
        }
        let (r, c) = (vx.dim(0), vx.dim(1));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let w = vs.data()[i];
            out.extend(vx.row(i).iter().map(|t| t * w));
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(Op::ScaleRows, vec![x, s], value))
    }

    /// x: [T, C_in], kernel: [k, C_in, C_out] with odd k. Output [T, C_out].
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (vx, vw) = (self.value(x), self.value(kernel));
        if vx.rank() != 2 || vw.rank() != 3 || vw.dim(1) != vx.dim(1) || vw.dim(0) % 2 == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?}, kernel {:?}", vx.shape(), vw.shape()),
            ));
        }
        let (t_len, c_in) = (vx.dim(0), vx.dim(1));
        let (k, c_out) = (vw.dim(0), vw.dim(2));
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            for u in 0..k {
                let src = t as isize + u as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xrow = vx.row(src as usize);
                for (i, &xv) in xrow.iter().enumerate().take(c_in) {
                    let wrow = &vw.data()[(u * c_in + i) * c_out..(u * c_in + i + 1) * c_out];
                    let orow = &mut out[t * c_out..(t + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![t_len, c_out], out)?;
        Ok(self.push(Op::Conv1d, vec![x, kernel], value))
    }

    /// x: [..., D], gain/bias: [D]. Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vx.rank() == 0 {
            return Err(Error::shape("layer_norm", "scalar input"));
        }
        let d = vx.dim(vx.rank() - 1);
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?}, bias {:?} vs lane {}", vg.shape(), vb.shape(), d),
            ));
        }
        let mut out = vec![0.0; vx.numel()];
        for (orow, irow) in out.chunks_mut(d).zip(vx.data().chunks(d)) {
            let mean = irow.iter().sum::<f64>() / d as f64;
            let var = irow.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                orow[j] = (irow[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], value))
    }

    pub fn smooth_l1(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&t| if t.abs() < 1.0 { 0.5 * t * t } else { t.abs() - 0.5 })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(Op::SmoothL1, vec![x], value)
    }

    /// Mean BCE of 1-D probabilities against fixed targets in [0, 1].
    pub fn bce_mean(&mut self, o: NodeId, targets: Arc<Vec<f64>>) -> Result<NodeId> {
        let v = self.value(o);
        if v.rank() != 1 || v.dim(0) != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_mean",
                format!("{:?} vs {} targets", v.shape(), targets.len()),
            ));
        }
        let n = targets.len() as f64;
        let mut acc = 0.0;
        for (&p, &t) in v.data().iter().zip(targets.iter()) {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc += t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let value = Tensor::scalar(-acc / n);
        Ok(self.push(Op::BceMean { targets }, vec![o], value))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode gradient of a scalar `loss` with respect to every
    /// reachable parameter. Unreached parameters simply stay absent from the
    /// accumulator (zero).
    pub fn backward(&self, loss: NodeId) -> Result<GradAccum> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut accum = GradAccum::new(self.param_count);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => accum.add(*pid, &g),
                Op::MatMul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (va, vb) = (self.value(a), self.value(b));
                    let (m, k, n) = (va.dim(0), va.dim(1), vb.dim(1));
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        mm_nt(g.data(), vb.data(), m, n, k, &mut da);
                        self.accumulate(&mut grads, a, Tensor::new(vec![m, k], da)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        mm_tn(va.data(), g.data(), m, k, n, &mut db);
                        self.accumulate(&mut grads, b, Tensor::new(vec![k, n], db)?);
                    }
                }
                Op::Transpose => {
                    let x = node.inputs[0];
                    let (r, c) = (g.dim(0), g.dim(1));
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(vec![c, r], dx)?);
                }
                Op::Add | Op::Sub => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let sign = if matches!(node.op, Op::Sub) { -1.0 } else { 1.0 };
                    if self.nodes[a.0].needs_grad {
                        self.accumulate(&mut grads, a, g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = reduce_to(&g, self.value(b).shape(), |_, gv| sign * gv, &[]);
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (va, vb) = (self.value(a), self.value(b));
                    let bn = vb.numel();
                    if self.nodes[a.0].needs_grad {
                        let data: Vec<f64> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * vb.data()[i % bn])
                            .collect();
                        self.accumulate(&mut grads, a, Tensor::new(va.shape().to_vec(), data)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = reduce_to(&g, vb.shape(), |i, gv| gv * va.data()[i], &[]);
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Div => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let (va, vb) = (self.value(a), self.value(b));
                    let bn = vb.numel();
                    if self.nodes[a.0].needs_grad {
                        let data: Vec<f64> = g
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv / vb.data()[i % bn])
                            .collect();
                        self.accumulate(&mut grads, a, Tensor::new(va.shape().to_vec(), data)?);
                    }
                    if self.nodes[b.0].needs_grad {
                        let adata = va.data();
                        let bdata = vb.data();
                        let db = reduce_to(&g, vb.shape(), |i, gv| {
                            let bv = bdata[i % bn];
                            -gv * adata[i] / (bv * bv)
                        }, &[]);
                        self.accumulate(&mut grads, b, db);
                    }
                }
                Op::Affine { scale, .. } => {
                    let x = node.inputs[0];
                    let data = g.data().iter().map(|gv| gv * scale).collect();
                    self.accumulate(&mut grads, x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Concat { axis } => {
                    let axis = *axis;
                    let shape = node.value.shape();
                    let outer: usize = shape[..axis].iter().product();
                    let tail: usize = shape[axis + 1..].iter().product();
                    let out_stride = shape[axis] * tail;
                    let mut offset = 0;
                    for &p in &node.inputs {
                        let pshape = self.value(p).shape().to_vec();
                        let span = pshape[axis] * tail;
                        if self.nodes[p.0].needs_grad {
                            let mut dp = Vec::with_capacity(outer * span);
                            for o in 0..outer {
                                let base = o * out_stride + offset;
                                dp.extend_from_slice(&g.data()[base..base + span]);
                            }
                            self.accumulate(&mut grads, p, Tensor::new(pshape, dp)?);
                        }
                        offset += span;
                    }
                }
                Op::Slice { axis, start } => {
                    let x = node.inputs[0];
                    let xshape = self.value(x).shape().to_vec();
                    let outer: usize = xshape[..*axis].iter().product();
                    let tail: usize = xshape[*axis + 1..].iter().product();
                    let in_stride = xshape[*axis] * tail;
                    let len = node.value.dim(*axis);
                    let mut dx = vec![0.0; xshape.iter().product()];
                    for o in 0..outer {
                        let dst = o * in_stride + start * tail;
                        let src = o * len * tail;
                        dx[dst..dst + len * tail]
                            .copy_from_slice(&g.data()[src..src + len * tail]);
                    }
                    self.accumulate(&mut grads, x, Tensor::new(xshape, dx)?);
                }
                Op::Reshape => {
                    let x = node.inputs[0];
                    let xshape = self.value(x).shape().to_vec();
                    let dx = Tensor::new(xshape, g.data().to_vec())?;
                    self.accumulate(&mut grads, x, dx);
                }
                Op::RepeatRows { times } => {
                    let x = node.inputs[0];
                    let v = self.value(x);
                    let (r, c) = (v.dim(0), v.dim(1));
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        for rep in 0..*times {
                            let src = (i * times + rep) * c;
                            for j in 0..c {
                                dx[i * c + j] += g.data()[src + j];
                            }
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(vec![r, c], dx)?);
                }
                Op::TileRows { times } => {
                    let x = node.inputs[0];
                    let v = self.value(x);
                    let n = v.numel();
                    let mut dx = vec![0.0; n];
                    for rep in 0..*times {
                        for j in 0..n {
                            dx[j] += g.data()[rep * n + j];
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(v.shape().to_vec(), dx)?);
                }
                Op::Softmax { mask } => {
                    let x = node.inputs[0];
                    let y = &node.value;
                    let lane = y.dim(y.rank() - 1);
                    let mut dx = vec![0.0; y.numel()];
                    for ((drow, yrow), grow) in dx
                        .chunks_mut(lane)
                        .zip(y.data().chunks(lane))
                        .zip(g.data().chunks(lane))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..lane {
                            let keep = mask.as_ref().map_or(true, |m| m[j]);
                            drow[j] = if keep { yrow[j] * (grow[j] - dot) } else { 0.0 };
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Sigmoid => {
                    let x = node.inputs[0];
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, gv)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(&mut grads, x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Tanh => {
                    let x = node.inputs[0];
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(y, gv)| gv * (1.0 - y * y))
                        .collect();
                    self.accumulate(&mut grads, x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    let data = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, gv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Sum { axis } | Op::Mean { axis } => {
                    let x = node.inputs[0];
                    let xshape = self.value(x).shape().to_vec();
                    let extent = xshape[*axis];
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / extent as f64
                    } else {
                        1.0
                    };
                    let outer: usize = xshape[..*axis].iter().product();
                    let tail: usize = xshape[*axis + 1..].iter().product();
                    let mut dx = vec![0.0; xshape.iter().product()];
                    for o in 0..outer {
                        for e in 0..extent {
                            let base = (o * extent + e) * tail;
                            for t in 0..tail {
                                dx[base + t] = g.data()[o * tail + t] * scale;
                            }
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(xshape, dx)?);
                }
                Op::L2Norm { axis, floor } => {
                    let x = node.inputs[0];
                    let vx = self.value(x);
                    let xshape = vx.shape().to_vec();
                    let extent = xshape[*axis];
                    let outer: usize = xshape[..*axis].iter().product();
                    let tail: usize = xshape[*axis + 1..].iter().product();
                    let mut dx = vec![0.0; vx.numel()];
                    for o in 0..outer {
                        for t in 0..tail {
                            let norm = node.value.data()[o * tail + t];
                            // Flat region of the floor: no gradient.
                            if norm <= *floor {
                                continue;
                            }
                            let gv = g.data()[o * tail + t];
                            for e in 0..extent {
                                let idx = (o * extent + e) * tail + t;
                                dx[idx] = gv * vx.data()[idx] / norm;
                            }
                        }
                    }
                    self.accumulate(&mut grads, x, Tensor::new(xshape, dx)?);
                }
                Op::MaskedFill { mask } => {
                    let x = node.inputs[0];
                    let data = g
                        .data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(gv, &m)| if m { 0.0 } else { *gv })
                        .collect();
                    self.accumulate(&mut grads, x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::Gather { indices } => {
                    let x = node.inputs[0];
                    let v = self.value(x);
                    let mut dx = vec![0.0; v.numel()];
                    for (pos, &src) in indices.iter().enumerate() {
                        dx[src] += g.data()[pos];
                    }
                    self.accumulate(&mut grads, x, Tensor::new(v.shape().to_vec(), dx)?);
                }
                Op::ScaleRows => {
                    let (x, s) = (node.inputs[0], node.inputs[1]);
                    let (vx, vs) = (self.value(x), self.value(s));
                    let (r, c) = (vx.dim(0), vx.dim(1));
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Vec::with_capacity(r * c);
                        for i in 0..r {
                            let w = vs.data()[i];
                            dx.extend(g.data()[i * c..(i + 1) * c].iter().map(|gv| gv * w));
                        }
                        self.accumulate(&mut grads, x, Tensor::new(vec![r, c], dx)?);
                    }
                    if self.nodes[s.0].needs_grad {
                        let mut ds = vec![0.0; r];
                        for i in 0..r {
                            ds[i] = g.data()[i * c..(i + 1) * c]
                                .iter()
                                .zip(vx.row(i))
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                        self.accumulate(&mut grads, s, Tensor::new(vec![r], ds)?);
                    }
                }
                Op::Conv1d => {
                    let (x, w) = (node.inputs[0], node.inputs[1]);
                    let (vx, vw) = (self.value(x), self.value(w));
                    let (t_len, c_in) = (vx.dim(0), vx.dim(1));
                    let (k, c_out) = (vw.dim(0), vw.dim(2));
                    let pad = (k - 1) / 2;
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; t_len * c_in];
                        for t in 0..t_len {
                            let grow = &g.data()[t * c_out..(t + 1) * c_out];
                            for u in 0..k {
                                let src = t as isize + u as isize - pad as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                let dxrow = &mut dx[src as usize * c_in..(src as usize + 1) * c_in];
                                for (i, dxv) in dxrow.iter_mut().enumerate() {
                                    let wrow =
                                        &vw.data()[(u * c_in + i) * c_out..(u * c_in + i + 1) * c_out];
                                    *dxv += grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                        self.accumulate(&mut grads, x, Tensor::new(vec![t_len, c_in], dx)?);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; k * c_in * c_out];
                        for t in 0..t_len {
                            let grow = &g.data()[t * c_out..(t + 1) * c_out];
                            for u in 0..k {
                                let src = t as isize + u as isize - pad as isize;
                                if src < 0 || src >= t_len as isize {
                                    continue;
                                }
                                let xrow = vx.row(src as usize);
                                for (i, &xv) in xrow.iter().enumerate() {
                                    let dwrow =
                                        &mut dw[(u * c_in + i) * c_out..(u * c_in + i + 1) * c_out];
                                    for (dwv, &gv) in dwrow.iter_mut().zip(grow) {
                                        *dwv += xv * gv;
                                    }
                                }
                            }
                        }
                        self.accumulate(&mut grads, w, Tensor::new(vec![k, c_in, c_out], dw)?);
                    }
                }
                Op::LayerNorm { eps } => {
                    let (x, gain, bias) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let vx = self.value(x);
                    let vg = self.value(gain);
                    let d = vx.dim(vx.rank() - 1);
                    let rows = vx.numel() / d;
                    let mut dx = vec![0.0; vx.numel()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for r in 0..rows {
                        let irow = &vx.data()[r * d..(r + 1) * d];
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let mean = irow.iter().sum::<f64>() / d as f64;
                        let var =
                            irow.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = irow.iter().map(|t| (t - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            grow.iter().zip(vg.data()).map(|(gv, gn)| gv * gn).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dgain[j] += grow[j] * xhat[j];
                            dbias[j] += grow[j];
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        self.accumulate(&mut grads, x, Tensor::new(vx.shape().to_vec(), dx)?);
                    }
                    if self.nodes[gain.0].needs_grad {
                        self.accumulate(&mut grads, gain, Tensor::new(vec![d], dgain)?);
                    }
                    if self.nodes[bias.0].needs_grad {
                        self.accumulate(&mut grads, bias, Tensor::new(vec![d], dbias)?);
                    }
                }
                Op::SmoothL1 => {
                    let x = node.inputs[0];
                    let data = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, gv)| {
                            let slope = if xv.abs() < 1.0 { xv } else { xv.signum() };
                            gv * slope
                        })
                        .collect();
                    self.accumulate(&mut grads, x, Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::BceMean { targets } => {
                    let o = node.inputs[0];
                    let vo = self.value(o);
                    let n = targets.len() as f64;
                    let gscalar = g.item();
                    let data = vo
                        .data()
                        .iter()
                        .zip(targets.iter())
                        .map(|(&p, &t)| {
                            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                                0.0 // inside the clamp's flat region
                            } else {
                                gscalar * (p - t) / (p * (1.0 - p) * n)
                            }
                        })
                        .collect();
                    self.accumulate(&mut grads, o, Tensor::new(vo.shape().to_vec(), data)?);
                }
            }
        }
        Ok(accum)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => grads[id.0] = Some(g),
        }
    }
}

/// Number of leading repetitions when broadcasting `b` over `a`; None when
/// the shapes do not conform (b must be a trailing suffix of a or a scalar).
fn broadcast_reps(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() {
        return None;
    }
    let split = a.len() - b.len();
    if a[split..] != *b {
        return None;
    }
    Some(a[..split].iter().product())
}

/// Reduce a full-shape gradient down to a broadcast operand's shape by
/// summing over the leading axes, applying `f(flat_index, grad)` first.
fn reduce_to(g: &Tensor, bshape: &[usize], f: impl Fn(usize, f64) -> f64, _: &[usize]) -> Tensor {
    let bn: usize = bshape.iter().product();
    let mut out = vec![0.0; bn];
    for (i, &gv) in g.data().iter().enumerate() {
        out[i % bn] += f(i, gv);
    }
    Tensor::new(bshape.to_vec(), out).expect("reduced shape")
}

fn softmax_row(row: &[f64], mask: Option<&[bool]>, out: &mut [f64]) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) {
            let e = (v - max).exp();
            out[j] = e;
            sum += e;
        } else {
            out[j] = 0.0;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ── Matmul kernels ──────────────────────────────────────────────────────
// Plain ikj loops keep the inner stride contiguous; good enough at the
// matrix sizes this crate runs at.

/// out[m,n] += a[m,k] * b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b[k,n]^T  (i.e. a · bᵀ)
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]  (i.e. aᵀ · b)
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
