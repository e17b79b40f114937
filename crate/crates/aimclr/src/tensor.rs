//! Dense-tensor computation tape with reverse-mode gradient accumulation.
//!
//! Operations record onto a [`Tape`] whenever an input requires gradient;
//! [`Tape::backward`] replays the records in reverse, accumulating d(loss)/dx
//! into every reachable tensor that requires gradient. All arithmetic is f64.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// A dense tensor node: flat row-major data plus shape.
#[derive(Debug, Clone)]
pub struct DiffTensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

impl DiffTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Result shape of numpy-style broadcasting (trailing axes aligned), or None
/// if the shapes are incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Flat-index map from an output shape into a broadcast operand.
/// `map[flat_out] = flat_in`. Identity cases short-circuit to None.
fn broadcast_index_map(out_shape: &[usize], in_shape: &[usize]) -> Option<Vec<usize>> {
    if out_shape == in_shape {
        return None;
    }
    let nd = out_shape.len();
    // Operand strides aligned to the output shape, 0 on broadcast axes.
    let mut strides = vec![0usize; nd];
    let offset = nd - in_shape.len();
    let mut s = 1usize;
    for i in (0..in_shape.len()).rev() {
        let d = in_shape[i];
        strides[offset + i] = if d == 1 { 0 } else { s };
        s *= d;
    }
    let total = numel_of(out_shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut flat_in = 0usize;
    for _ in 0..total {
        map.push(flat_in);
        // Odometer increment with incremental operand offset.
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            flat_in += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat_in -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        out: usize,
    },
    AddScalar {
        input: usize,
        out: usize,
    },
    MulScalar {
        input: usize,
        c: f64,
        out: usize,
    },
    Neg {
        input: usize,
        out: usize,
    },
    Relu {
        input: usize,
        out: usize,
    },
    Sigmoid {
        input: usize,
        out: usize,
    },
    Exp {
        input: usize,
        out: usize,
    },
    Log {
        input: usize,
        out: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        out: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SumAxes {
        input: usize,
        out: usize,
        axes: Vec<usize>,
    },
    Softmax {
        input: usize,
        out: usize,
        axis: usize,
    },
    L2Normalize {
        input: usize,
        out: usize,
        axis: usize,
    },
    Concat {
        inputs: Vec<usize>,
        out: usize,
        axis: usize,
    },
    Reshape {
        input: usize,
        out: usize,
    },
    Conv1dTemporal {
        x: usize,
        w: usize,
        b: usize,
        out: usize,
        stride: usize,
        pad: usize,
    },
    MaskMul {
        input: usize,
        out: usize,
        mask: Vec<f64>,
    },
}

/// Recording tape. One tape per forward/backward pass; tapes are independent
/// and may run on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<DiffTensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Register a leaf tensor. Data length must match the shape product.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorRef> {
        if data.len() != numel_of(&shape) {
            return Err(Error::invalid(
                "leaf",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(self.push(DiffTensor {
            data,
            shape,
            requires_grad,
        }))
    }

    /// Register a non-gradient constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorRef> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.push(DiffTensor {
            data: vec![v],
            shape: vec![1],
            requires_grad: false,
        })
    }

    fn push(&mut self, t: DiffTensor) -> TensorRef {
        self.nodes.push(t);
        self.grads.push(None);
        TensorRef(self.nodes.len() - 1)
    }

    pub fn data(&self, t: TensorRef) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self, t: TensorRef) -> f64 {
        debug_assert_eq!(self.nodes[t.0].numel(), 1);
        self.nodes[t.0].data[0]
    }

    /// Accumulated gradient, None if no gradient flowed to this tensor.
    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.grads[t.0].as_deref()
    }

    /// Gradient as an owned vector, zeros when no gradient flowed.
    pub fn grad_or_zeros(&self, t: TensorRef) -> Vec<f64> {
        match &self.grads[t.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[t.0].numel()],
        }
    }

    fn out_of(&mut self, data: Vec<f64>, shape: Vec<usize>, rg: bool) -> TensorRef {
        self.push(DiffTensor {
            data,
            shape,
            requires_grad: rg,
        })
    }

    fn record(&mut self, rg: bool, op: Op) {
        if rg {
            self.ops.push(op);
        }
    }

    // ── Elementwise binary ops with trailing-axis broadcasting ─────────

    fn binary(&mut self, kind: BinaryKind, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: kind.name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let map_a = broadcast_index_map(&out_shape, &sa);
        let map_b = broadcast_index_map(&out_shape, &sb);
        let total = numel_of(&out_shape);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(total);
        for e in 0..total {
            let va = da[map_a.as_ref().map_or(e, |m| m[e])];
            let vb = db[map_b.as_ref().map_or(e, |m| m[e])];
            out.push(match kind {
                BinaryKind::Add => va + vb,
                BinaryKind::Sub => va - vb,
                BinaryKind::Mul => va * vb,
                BinaryKind::Div => va / vb,
            });
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out_of(out, out_shape, rg);
        self.record(
            rg,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                out: out.0,
            },
        );
        Ok(out)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ── Scalar and unary ops ────────────────────────────────────────────

    pub fn add_scalar(&mut self, input: TensorRef, c: f64) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::AddScalar {
                input: input.0,
                out: out.0,
            },
        );
        out
    }

    pub fn mul_scalar(&mut self, input: TensorRef, c: f64) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::MulScalar {
                input: input.0,
                c,
                out: out.0,
            },
        );
        out
    }

    pub fn neg(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| -v).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::Neg {
                input: input.0,
                out: out.0,
            },
        );
        out
    }

    pub fn relu(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::Relu {
                input: input.0,
                out: out.0,
            },
        );
        out
    }

    pub fn sigmoid(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::Sigmoid {
                input: input.0,
                out: out.0,
            },
        );
        out
    }

    pub fn exp(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::Exp {
                input: input.0,
                out: out.0,
            },
        );
        out
    }

    pub fn log(&mut self, input: TensorRef) -> TensorRef {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[input.0].shape.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::Log {
                input: input.0,
                out: out.0,
            },
        );
        out
    }

    // ── Matmul ──────────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f64; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let out = self.out_of(out, vec![m, n], rg);
        self.record(
            rg,
            Op::Matmul {
                a: a.0,
                b: b.0,
                out: out.0,
                m,
                k,
                n,
            },
        );
        Ok(out)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Sum over the given axes; the axes are removed from the output shape.
    /// Summing over every axis yields a `[1]` scalar.
    pub fn sum_axes(&mut self, input: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        let shape = self.shape(input).to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::invalid(
                    "sum_axes",
                    format!("axis {} out of range for shape {:?}", ax, shape),
                ));
            }
        }
        let out_shape = reduced_shape(&shape, axes);
        let map = reduction_index_map(&shape, axes);
        let mut out = vec![0.0f64; numel_of(&out_shape)];
        for (i, &v) in self.nodes[input.0].data.iter().enumerate() {
            out[map[i]] += v;
        }
        let rg = self.requires_grad(input);
        let out = self.out_of(out, out_shape, rg);
        self.record(
            rg,
            Op::SumAxes {
                input: input.0,
                out: out.0,
                axes: axes.to_vec(),
            },
        );
        Ok(out)
    }

    pub fn sum_all(&mut self, input: TensorRef) -> Result<TensorRef> {
        let all: Vec<usize> = (0..self.shape(input).len()).collect();
        self.sum_axes(input, &all)
    }

    /// Mean over the given axes (sum followed by scale).
    pub fn mean_axes(&mut self, input: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        let shape = self.shape(input).to_vec();
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        let s = self.sum_axes(input, axes)?;
        Ok(self.mul_scalar(s, 1.0 / count as f64))
    }

    pub fn mean_all(&mut self, input: TensorRef) -> Result<TensorRef> {
        let all: Vec<usize> = (0..self.shape(input).len()).collect();
        self.mean_axes(input, &all)
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// Softmax along one axis, computed with max subtraction.
    pub fn softmax(&mut self, input: TensorRef, axis: usize) -> Result<TensorRef> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let mut data = self.nodes[input.0].data.clone();
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..len {
                mx = mx.max(data[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..len {
                let e = (data[base + i * stride] - mx).exp();
                data[base + i * stride] = e;
                sum += e;
            }
            for i in 0..len {
                data[base + i * stride] /= sum;
            }
        });
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::Softmax {
                input: input.0,
                out: out.0,
                axis,
            },
        );
        Ok(out)
    }

    /// L2 normalization along one axis. Rejects lanes with zero norm.
    pub fn l2_normalize(&mut self, input: TensorRef, axis: usize) -> Result<TensorRef> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "l2_normalize",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let mut data = self.nodes[input.0].data.clone();
        let mut zero_lane = false;
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut sq = 0.0;
            for i in 0..len {
                let v = data[base + i * stride];
                sq += v * v;
            }
            let n = sq.sqrt();
            if n == 0.0 {
                zero_lane = true;
                return;
            }
            for i in 0..len {
                data[base + i * stride] /= n;
            }
        });
        if zero_lane {
            return Err(Error::invalid("l2_normalize", "zero-norm lane".to_string()));
        }
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::L2Normalize {
                input: input.0,
                out: out.0,
                axis,
            },
        );
        Ok(out)
    }

    /// Concatenate along an axis; all other dims must agree.
    pub fn concat(&mut self, inputs: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut axis_total = 0usize;
        for &t in inputs {
            let s = self.shape(t);
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0f64; numel_of(&out_shape)];
        let mut offset = 0usize;
        for &t in inputs {
            let len_ax = self.shape(t)[axis];
            let src = &self.nodes[t.0].data;
            for o in 0..outer {
                let dst_base = (o * axis_total + offset) * inner;
                let src_base = o * len_ax * inner;
                out[dst_base..dst_base + len_ax * inner]
                    .copy_from_slice(&src[src_base..src_base + len_ax * inner]);
            }
            offset += len_ax;
        }
        let rg = inputs.iter().any(|&t| self.requires_grad(t));
        let out = self.out_of(out, out_shape, rg);
        self.record(
            rg,
            Op::Concat {
                inputs: inputs.iter().map(|t| t.0).collect(),
                out: out.0,
                axis,
            },
        );
        Ok(out)
    }

    /// Reinterpret the data with a new shape of equal element count.
    pub fn reshape(&mut self, input: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let old = self.shape(input).to_vec();
        if numel_of(&old) != numel_of(shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[input.0].data.clone();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape.to_vec(), rg);
        self.record(
            rg,
            Op::Reshape {
                input: input.0,
                out: out.0,
            },
        );
        Ok(out)
    }

    /// 1-D convolution along the middle (temporal) axis of `x: [C_in,T,V]`
    /// with weight `[C_out,C_in,K]`, bias `[C_out]`, zero padding.
    pub fn conv1d_temporal(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[0] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_temporal",
                lhs: sx,
                rhs: sw,
            });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "conv1d_temporal",
                lhs: sw,
                rhs: sb,
            });
        }
        let (c_in, t_in, v) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if t_in + 2 * pad < k || stride == 0 {
            return Err(Error::invalid(
                "conv1d_temporal",
                format!("kernel {} does not fit T {} with pad {}", k, t_in, pad),
            ));
        }
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0f64; c_out * t_out * v];
        for o in 0..c_out {
            let orow = &mut out[o * t_out * v..(o + 1) * t_out * v];
            for tv in orow.iter_mut() {
                *tv = bd[o];
            }
            for c in 0..c_in {
                for kk in 0..k {
                    let wv = wd[(o * c_in + c) * k + kk];
                    if wv == 0.0 {
                        continue;
                    }
                    for to in 0..t_out {
                        let ti = (to * stride + kk) as isize - pad as isize;
                        if ti < 0 || ti as usize >= t_in {
                            continue;
                        }
                        let src = &xd[(c * t_in + ti as usize) * v..(c * t_in + ti as usize) * v + v];
                        let dst = &mut orow[to * v..to * v + v];
                        for j in 0..v {
                            dst[j] += wv * src[j];
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        let out = self.out_of(out, vec![c_out, t_out, v], rg);
        self.record(
            rg,
            Op::Conv1dTemporal {
                x: x.0,
                w: w.0,
                b: b.0,
                out: out.0,
                stride,
                pad,
            },
        );
        Ok(out)
    }

    /// Elementwise multiply by a constant mask of identical shape. The mask
    /// is not a tape tensor and receives no gradient.
    pub fn mask_mul(&mut self, input: TensorRef, mask: &[f64]) -> Result<TensorRef> {
        let shape = self.shape(input).to_vec();
        if mask.len() != numel_of(&shape) {
            return Err(Error::ShapeMismatch {
                op: "mask_mul",
                lhs: shape,
                rhs: vec![mask.len()],
            });
        }
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let rg = self.requires_grad(input);
        let out = self.out_of(data, shape, rg);
        self.record(
            rg,
            Op::MaskMul {
                input: input.0,
                out: out.0,
                mask: mask.to_vec(),
            },
        );
        Ok(out)
    }

    /// Dot product of two same-shape tensors (elementwise product, summed).
    pub fn dot(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every tensor with `requires_grad`
    /// reachable from the loss ends up holding d(loss)/d(tensor); gradients
    /// accumulate additively across multiple uses.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        if self.grads[loss.0].is_none() {
            self.grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, grad: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad.iter()) {
                    *e += g;
                }
            }
            None => self.grads[id] = Some(grad.to_vec()),
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Binary { kind, a, b, out } => {
                let g = match &self.grads[*out] {
                    Some(g) => g.clone(),
                    None => return,
                };
                let out_shape = self.nodes[*out].shape.clone();
                let sa = self.nodes[*a].shape.clone();
                let sb = self.nodes[*b].shape.clone();
                let map_a = broadcast_index_map(&out_shape, &sa);
                let map_b = broadcast_index_map(&out_shape, &sb);
                let da = &self.nodes[*a].data;
                let db = &self.nodes[*b].data;
                let mut ga = vec![0.0f64; da.len()];
                let mut gb = vec![0.0f64; db.len()];
                for (e, &ge) in g.iter().enumerate() {
                    let ia = map_a.as_ref().map_or(e, |m| m[e]);
                    let ib = map_b.as_ref().map_or(e, |m| m[e]);
                    match kind {
                        BinaryKind::Add => {
                            ga[ia] += ge;
                            gb[ib] += ge;
                        }
                        BinaryKind::Sub => {
                            ga[ia] += ge;
                            gb[ib] -= ge;
                        }
                        BinaryKind::Mul => {
                            ga[ia] += ge * db[ib];
                            gb[ib] += ge * da[ia];
                        }
                        BinaryKind::Div => {
                            let bv = db[ib];
                            ga[ia] += ge / bv;
                            gb[ib] -= ge * da[ia] / (bv * bv);
                        }
                    }
                }
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::AddScalar { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    self.accumulate(*input, &g);
                }
            }
            Op::MulScalar { input, c, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    let gi: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Neg { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    let gi: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Relu { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    let x = &self.nodes[*input].data;
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(x.iter())
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Sigmoid { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    let y = &self.nodes[*out].data;
                    let gi: Vec<f64> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                        .collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Exp { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    let y = &self.nodes[*out].data;
                    let gi: Vec<f64> = g.iter().zip(y.iter()).map(|(gv, &yv)| gv * yv).collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Log { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    let x = &self.nodes[*input].data;
                    let gi: Vec<f64> = g.iter().zip(x.iter()).map(|(gv, &xv)| gv / xv).collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Matmul { a, b, out, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(g) = self.grads[*out].clone() {
                    // dA[i,p] = sum_j G[i,j] B[p,j]
                    let bd = &self.nodes[*b].data;
                    let mut ga = vec![0.0f64; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            garow[p] = s;
                        }
                    }
                    self.accumulate(*a, &ga);
                    // dB[p,j] = sum_i A[i,p] G[i,j]
                    let ad = &self.nodes[*a].data;
                    let mut gb = vec![0.0f64; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &ad[i * k..(i + 1) * k];
                        for p in 0..k {
                            let av = arow[p];
                            if av == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..n {
                                gbrow[j] += av * grow[j];
                            }
                        }
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::SumAxes { input, out, axes } => {
                if let Some(g) = self.grads[*out].clone() {
                    let shape = self.nodes[*input].shape.clone();
                    let map = reduction_index_map(&shape, axes);
                    let gi: Vec<f64> = map.iter().map(|&oi| g[oi]).collect();
                    self.accumulate(*input, &gi);
                }
            }
            Op::Softmax { input, out, axis } => {
                if let Some(g) = self.grads[*out].clone() {
                    let shape = self.nodes[*out].shape.clone();
                    let y = self.nodes[*out].data.clone();
                    let mut gi = vec![0.0f64; y.len()];
                    for_each_lane(&shape, *axis, |base, stride, len| {
                        let mut dotv = 0.0;
                        for i in 0..len {
                            dotv += g[base + i * stride] * y[base + i * stride];
                        }
                        for i in 0..len {
                            let e = base + i * stride;
                            gi[e] = y[e] * (g[e] - dotv);
                        }
                    });
                    self.accumulate(*input, &gi);
                }
            }
            Op::L2Normalize { input, out, axis } => {
                if let Some(g) = self.grads[*out].clone() {
                    let shape = self.nodes[*out].shape.clone();
                    let x = self.nodes[*input].data.clone();
                    let y = self.nodes[*out].data.clone();
                    let mut gi = vec![0.0f64; y.len()];
                    for_each_lane(&shape, *axis, |base, stride, len| {
                        let mut sq = 0.0;
                        let mut dotv = 0.0;
                        for i in 0..len {
                            let e = base + i * stride;
                            sq += x[e] * x[e];
                            dotv += g[e] * y[e];
                        }
                        let n = sq.sqrt();
                        for i in 0..len {
                            let e = base + i * stride;
                            gi[e] = (g[e] - y[e] * dotv) / n;
                        }
                    });
                    self.accumulate(*input, &gi);
                }
            }
            Op::Concat { inputs, out, axis } => {
                if let Some(g) = self.grads[*out].clone() {
                    let out_shape = self.nodes[*out].shape.clone();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let axis_total = out_shape[*axis];
                    let mut offset = 0usize;
                    for &inp in inputs {
                        let len_ax = self.nodes[inp].shape[*axis];
                        let mut gi = vec![0.0f64; self.nodes[inp].numel()];
                        for o in 0..outer {
                            let src_base = (o * axis_total + offset) * inner;
                            let dst_base = o * len_ax * inner;
                            gi[dst_base..dst_base + len_ax * inner]
                                .copy_from_slice(&g[src_base..src_base + len_ax * inner]);
                        }
                        self.accumulate(inp, &gi);
                        offset += len_ax;
                    }
                }
            }
            Op::Reshape { input, out } => {
                if let Some(g) = self.grads[*out].clone() {
                    self.accumulate(*input, &g);
                }
            }
            Op::Conv1dTemporal {
                x,
                w,
                b,
                out,
                stride,
                pad,
            } => {
                if let Some(g) = self.grads[*out].clone() {
                    let sx = self.nodes[*x].shape.clone();
                    let sw = self.nodes[*w].shape.clone();
                    let (c_in, t_in, v) = (sx[0], sx[1], sx[2]);
                    let (c_out, k) = (sw[0], sw[2]);
                    let (stride, pad) = (*stride, *pad);
                    let t_out = self.nodes[*out].shape[1];
                    let xd = &self.nodes[*x].data;
                    let wd = &self.nodes[*w].data;
                    let mut gx = vec![0.0f64; xd.len()];
                    let mut gw = vec![0.0f64; wd.len()];
                    let mut gb = vec![0.0f64; c_out];
                    for o in 0..c_out {
                        let grow = &g[o * t_out * v..(o + 1) * t_out * v];
                        for gv in grow.iter() {
                            gb[o] += gv;
                        }
                        for c in 0..c_in {
                            for kk in 0..k {
                                let wv = wd[(o * c_in + c) * k + kk];
                                let mut ws = 0.0;
                                for to in 0..t_out {
                                    let ti = (to * stride + kk) as isize - pad as isize;
                                    if ti < 0 || ti as usize >= t_in {
                                        continue;
                                    }
                                    let ti = ti as usize;
                                    let gslice = &grow[to * v..to * v + v];
                                    let xslice = &xd[(c * t_in + ti) * v..(c * t_in + ti) * v + v];
                                    let gxslice =
                                        &mut gx[(c * t_in + ti) * v..(c * t_in + ti) * v + v];
                                    for j in 0..v {
                                        gxslice[j] += wv * gslice[j];
                                        ws += xslice[j] * gslice[j];
                                    }
                                }
                                gw[(o * c_in + c) * k + kk] += ws;
                            }
                        }
                    }
                    self.accumulate(*x, &gx);
                    self.accumulate(*w, &gw);
                    self.accumulate(*b, &gb);
                }
            }
            Op::MaskMul { input, out, mask } => {
                if let Some(g) = self.grads[*out].clone() {
                    let gi: Vec<f64> = g.iter().zip(mask.iter()).map(|(gv, m)| gv * m).collect();
                    self.accumulate(*input, &gi);
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Raw matrix product C += A[m,k] x B[k,n] into a zeroed output buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..shape.len())
        .filter(|i| !axes.contains(i))
        .map(|i| shape[i])
        .collect();
    if kept.is_empty() {
        vec![1]
    } else {
        kept
    }
}

/// Flat map from input indices to reduced-output indices for axis reduction.
fn reduction_index_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let nd = shape.len();
    let mut out_strides = vec![0usize; nd];
    let mut s = 1usize;
    for i in (0..nd).rev() {
        if axes.contains(&i) {
            out_strides[i] = 0;
        } else {
            out_strides[i] = s;
            s *= shape[i];
        }
    }
    let total = numel_of(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut flat_out = 0usize;
    for _ in 0..total {
        map.push(flat_out);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            flat_out += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            flat_out -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Visit every lane along `axis`: calls f(base, stride, len) per lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..stride {
            f(o * len * stride + i, stride, len);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {}: actual={} expected={} diff={}",
                i,
                a,
                e,
                (a - e).abs()
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let v = tape.constant(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.data(out), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{}", msg);
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{}", msg);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        let third = 1.0 / 3.0;
        assert_close(tape.data(y), &[third, third, third], 1e-15);
    }

    #[test]
    fn softmax_sums_to_one_and_nonnegative() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![3.0, -1.0, 100.0, 0.5, -40.0, 2.0], vec![2, 3])
            .unwrap();
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.data(y);
        for row in 0..2 {
            let s: f64 = d[row * 3..(row + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(d.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![3.0, 4.0], vec![2]).unwrap();
        let y = tape.l2_normalize(x, 0).unwrap();
        assert_close(tape.data(y), &[0.6, 0.8], 1e-15);
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![0.3, -2.0, 7.5, 1e-3, 4.0], vec![5])
            .unwrap();
        let y = tape.l2_normalize(x, 0).unwrap();
        let n: f64 = tape.data(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn l2_normalize_rejects_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0], vec![2]).unwrap();
        assert!(tape.l2_normalize(x, 0).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        // loss = sum(x*x), x=[1,2] -> grad = 2x = [2,4]
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x).unwrap(), &[2.0, 4.0], 1e-12);
    }

    #[test]
    fn backward_dead_relu() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![-5.0], vec![1], true).unwrap();
        let y = tape.relu(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_log_softmax_entry() {
        // loss = -log(softmax([a,b]))[0]; d/da = softmax_0 - 1, d/db = softmax_1.
        // Spec form: grad(a) of log softmax picked at 0 is 1 - softmax_0.
        let (a, b) = (0.7, -0.3);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![a, b], vec![2], true).unwrap();
        let p = tape.softmax(x, 0).unwrap();
        let lp = tape.log(p);
        let picked = tape.mask_mul(lp, &[1.0, 0.0]).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        let e0 = a.exp() / (a.exp() + b.exp());
        let g = tape.grad(x).unwrap();
        assert!((g[0] - (1.0 - e0)).abs() < 1e-12);
        assert!((g[1] - (-(1.0 - e0))).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        // y = a + a -> grad(a) = 2
        let mut tape = Tape::new();
        let a = tape.leaf(vec![3.0], vec![1], true).unwrap();
        let y = tape.add(a, a).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true).unwrap();
        let c = tape.constant(vec![5.0], vec![1]).unwrap();
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn broadcast_add_bias() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], true)
            .unwrap();
        let b = tape.leaf(vec![10.0, 20.0], vec![2, 1], true).unwrap();
        let y = tape.add(x, b).unwrap();
        assert_close(
            tape.data(y),
            &[11.0, 12.0, 13.0, 24.0, 25.0, 26.0],
            1e-12,
        );
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_close(tape.grad(b).unwrap(), &[3.0, 3.0], 1e-12);
        assert_close(tape.grad(x).unwrap(), &[1.0; 6], 1e-12);
    }

    #[test]
    fn broadcast_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 2], vec![2]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn div_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![6.0], vec![1], true).unwrap();
        let b = tape.leaf(vec![3.0], vec![1], true).unwrap();
        let y = tape.div(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_close(tape.grad(a).unwrap(), &[1.0 / 3.0], 1e-12);
        assert_close(tape.grad(b).unwrap(), &[-6.0 / 9.0], 1e-12);
    }

    #[test]
    fn sum_axes_and_backward() {
        let mut tape = Tape::new();
        let x = tape
            .leaf((1..=24).map(|v| v as f64).collect(), vec![2, 3, 4], true)
            .unwrap();
        let s = tape.sum_axes(x, &[1]).unwrap();
        assert_eq!(tape.shape(s), &[2, 4]);
        // out[0,0] = 1 + 5 + 9
        assert_eq!(tape.data(s)[0], 15.0);
        let total = tape.sum_all(s).unwrap();
        tape.backward(total).unwrap();
        assert_close(tape.grad(x).unwrap(), &[1.0; 24], 1e-12);
    }

    #[test]
    fn mean_axes_value() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1.0, 3.0, 5.0, 7.0], vec![2, 2])
            .unwrap();
        let m = tape.mean_axes(x, &[0, 1]).unwrap();
        assert_eq!(tape.value(m), 4.0);
    }

    #[test]
    fn concat_and_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![2, 1], true).unwrap();
        let b = tape.leaf(vec![3.0], vec![1, 1], true).unwrap();
        let y = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0]);
        let w = tape.mask_mul(y, &[1.0, 10.0, 100.0]).unwrap();
        let s = tape.sum_all(w).unwrap();
        tape.backward(s).unwrap();
        assert_close(tape.grad(a).unwrap(), &[1.0, 10.0], 1e-12);
        assert_close(tape.grad(b).unwrap(), &[100.0], 1e-12);
    }

    #[test]
    fn conv1d_identity_kernel() {
        // K=1 kernel with weight 1 reproduces the input channel.
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1, 3, 2])
            .unwrap();
        let w = tape.constant(vec![1.0], vec![1, 1, 1]).unwrap();
        let b = tape.constant(vec![0.0], vec![1]).unwrap();
        let y = tape.conv1d_temporal(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv1d_stride_and_padding_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0; 2 * 8 * 3], vec![2, 8, 3]).unwrap();
        let w = tape.constant(vec![0.0; 4 * 2 * 5], vec![4, 2, 5]).unwrap();
        let b = tape.constant(vec![0.0; 4], vec![4]).unwrap();
        let y = tape.conv1d_temporal(x, w, b, 2, 2).unwrap();
        // T_out = (8 + 4 - 5)/2 + 1 = 4
        assert_eq!(tape.shape(y), &[4, 4, 3]);
    }

    #[test]
    fn reshape_is_free_and_backward_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let y = tape.reshape(x, &[4]).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_close(tape.grad(x).unwrap(), &[1.0; 4], 1e-12);
    }
}
