//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it needs for the backward sweep. Nodes are appended in evaluation order, so
//! the node list is already topologically sorted and `backward` simply walks
//! it in reverse.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{AdError, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{gemm, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: u32,
    tape: u32,
}

/// Primitive kinds with their attributes, for generic dispatch through
/// [`Tape::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    MatMul,
    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    Add,
    Sub,
    Mul,
    Min,
    Scale(f64),
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Softmax,
    LogSoftmax,
    /// Rows of the (single) input table at the given indices.
    Embedding(Vec<usize>),
    /// Valid-padding convolution of an `[H, W, C]` input with an
    /// `[kh, kw, C, O]` kernel.
    Conv2d { stride: usize },
    SumAxis(usize),
    MeanAxis(usize),
    SumAll,
    Concat(usize),
    /// `out[i] = x[i, idx[i]]` for a 2-D input.
    Gather(Vec<usize>),
    /// `out[i] = -x[i, idx[i]]` for a 2-D input.
    NllGather(Vec<usize>),
    Reshape(Vec<usize>),
    SliceLast { start: usize, len: usize },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Min => "min",
            Primitive::Scale(_) => "scale",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Embedding(_) => "embedding",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::SumAll => "sum_all",
            Primitive::Concat(_) => "concat",
            Primitive::Gather(_) => "gather",
            Primitive::NllGather(_) => "nll_gather",
            Primitive::Reshape(_) => "reshape",
            Primitive::SliceLast { .. } => "slice_last",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>, f64),
    Reshape(Var),
    SliceLast(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape; one forward graph, one backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
    kink: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(AdError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    /// New tape. Non-finite checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }

    pub fn with_checks(check_finite: bool) -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            check_finite,
            kink: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// True once any relu saw an exact zero or any min saw an exact tie;
    /// gradients at such points are subgradients.
    pub fn hit_kink(&self) -> bool {
        self.kink
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(AdError::ForeignVar);
        }
        Ok(&self.nodes[v.idx as usize])
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx as usize].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(AdError::TapeConsumed);
        }
        if self.check_finite && !value.is_finite() {
            return Err(AdError::NonFinite { op: op_name });
        }
        let requires_grad = inputs
            .iter()
            .any(|v| self.nodes[v.idx as usize].requires_grad);
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { idx, tape: self.id })
    }

    // Values are checked when pushed, so inputs only need a membership check.
    fn check_inputs(&self, _op: &'static str, inputs: &[Var]) -> Result<()> {
        for &v in inputs {
            self.node(v)?;
        }
        Ok(())
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, &[])
    }

    /// Records a parameter; gradients flow back into `params` unless frozen.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        let p = params.get(id);
        let v = self.push("param", p.value.clone(), Op::Param(id), &[])?;
        self.nodes[v.idx as usize].requires_grad = !p.frozen;
        Ok(v)
    }

    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AdError::InvalidAttr {
                    op: kind.name(),
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Min => arity(2).and_then(|_| self.min(inputs[0], inputs[1])),
            Primitive::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], *c)),
            Primitive::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            Primitive::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            Primitive::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            Primitive::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Primitive::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            Primitive::LogSoftmax => arity(1).and_then(|_| self.log_softmax(inputs[0])),
            Primitive::Embedding(idx) => arity(1).and_then(|_| self.embedding(inputs[0], idx)),
            Primitive::Conv2d { stride } => {
                arity(2).and_then(|_| self.conv2d(inputs[0], inputs[1], *stride))
            }
            Primitive::SumAxis(a) => arity(1).and_then(|_| self.sum_axis(inputs[0], *a)),
            Primitive::MeanAxis(a) => arity(1).and_then(|_| self.mean_axis(inputs[0], *a)),
            Primitive::SumAll => arity(1).and_then(|_| self.sum_all(inputs[0])),
            Primitive::Concat(a) => self.concat(inputs, *a),
            Primitive::Gather(idx) => arity(1).and_then(|_| self.gather(inputs[0], idx)),
            Primitive::NllGather(idx) => arity(1).and_then(|_| self.nll_gather(inputs[0], idx)),
            Primitive::Reshape(s) => arity(1).and_then(|_| self.reshape(inputs[0], s)),
            Primitive::SliceLast { start, len } => {
                arity(1).and_then(|_| self.slice_last(inputs[0], *start, *len))
            }
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_inputs("matmul", &[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_inputs(name, &[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        suffix_broadcast(name, ta.shape(), tb.shape())?;
        let bl = tb.len();
        let data = ta
            .data()
            .chunks(bl)
            .flat_map(|chunk| chunk.iter().zip(tb.data()).map(|(x, y)| f(*x, *y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise minimum of equal-shape inputs. Ties route the gradient
    /// to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_inputs("min", &[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AdError::ShapeMismatch {
                op: "min",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut tie = false;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                tie |= x == y;
                x.min(y)
            })
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.kink |= tie;
        self.push("min", t, Op::Min(a, b), &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        self.check_inputs(name, &[a])?;
        let ta = self.value(a);
        Ok(Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(AdError::InvalidAttr {
                op: "scale",
                detail: format!("non-finite factor {c}"),
            });
        }
        let t = self.unary("scale", a, |x| x * c)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("sigmoid", a, sigmoid)?;
        self.push("sigmoid", t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("tanh", a, f64::tanh)?;
        self.push("tanh", t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("relu", a, |x| x.max(0.0))?;
        if self.value(a).data().contains(&0.0) {
            self.kink = true;
        }
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.unary("exp", a, f64::exp)?;
        self.push("exp", t, Op::Exp(a), &[a])
    }

    fn last_axis_rows(&self, name: &'static str, a: Var) -> Result<usize> {
        let s = self.value(a).shape();
        match s.last() {
            Some(&c) => Ok(c),
            None => Err(AdError::InvalidShape {
                op: name,
                shape: s.to_vec(),
                detail: "needs at least one axis".into(),
            }),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_inputs("softmax", &[a])?;
        let c = self.last_axis_rows("softmax", a)?;
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_inputs("log_softmax", &[a])?;
        let c = self.last_axis_rows("log_softmax", a)?;
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("log_softmax", t, Op::LogSoftmax(a), &[a])
    }

    /// Looks up rows of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check_inputs("embedding", &[table])?;
        let tt = self.value(table);
        let s = tt.shape();
        if s.len() != 2 {
            return Err(AdError::InvalidShape {
                op: "embedding",
                shape: s.to_vec(),
                detail: "table must be 2-D".into(),
            });
        }
        if indices.is_empty() {
            return Err(AdError::InvalidAttr {
                op: "embedding",
                detail: "no indices".into(),
            });
        }
        let (v, d) = (s[0], s[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(AdError::IndexOutOfRange {
                    op: "embedding",
                    index: i,
                    extent: v,
                });
            }
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_parts(vec![indices.len(), d], data);
        self.push(
            "embedding",
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    /// Valid-padding 2-D convolution, `[H, W, C] * [kh, kw, C, O] -> [Ho, Wo, O]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        self.check_inputs("conv2d", &[input, kernel])?;
        if stride == 0 {
            return Err(AdError::InvalidAttr {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (si, sk) = (ti.shape(), tk.shape());
        if si.len() != 3 || sk.len() != 4 || si[2] != sk[2] || sk[0] > si[0] || sk[1] > si[1] {
            return Err(AdError::ShapeMismatch {
                op: "conv2d",
                lhs: si.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (h, w, c) = (si[0], si[1], si[2]);
        let (kh, kw, o) = (sk[0], sk[1], sk[3]);
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let patch = kh * kw * c;
        let mut cols = vec![0.0; ho * wo * patch];
        let x = ti.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut cols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                let mut q = 0;
                for dy in 0..kh {
                    let base = ((oy * stride + dy) * w + ox * stride) * c;
                    row[q..q + kw * c].copy_from_slice(&x[base..base + kw * c]);
                    q += kw * c;
                }
            }
        }
        let mut out = vec![0.0; ho * wo * o];
        gemm(ho * wo, patch, o, &cols, patch, 1, tk.data(), o, 1, &mut out);
        self.push(
            "conv2d",
            Tensor::from_parts(vec![ho, wo, o], out),
            Op::Conv2d {
                input,
                kernel,
                stride,
                cols,
            },
            &[input, kernel],
        )
    }

    fn check_axis(&self, name: &'static str, a: Var, axis: usize) -> Result<()> {
        let s = self.value(a).shape();
        if axis >= s.len() {
            return Err(AdError::InvalidAttr {
                op: name,
                detail: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        Ok(())
    }

    fn reduce_axis(&self, a: Var, axis: usize, factor: f64) -> Tensor {
        let ta = self.value(a);
        let (outer, ax, inner) = split_axis(ta.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let x = ta.data();
        for o in 0..outer {
            for k in 0..ax {
                let src = &x[(o * ax + k) * inner..(o * ax + k + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if factor != 1.0 {
            for v in &mut out {
                *v *= factor;
            }
        }
        Tensor::from_parts(removed_axis(ta.shape(), axis), out)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_inputs("sum_axis", &[a])?;
        self.check_axis("sum_axis", a, axis)?;
        let t = self.reduce_axis(a, axis, 1.0);
        self.push("sum_axis", t, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_inputs("mean_axis", &[a])?;
        self.check_axis("mean_axis", a, axis)?;
        let n = self.value(a).shape()[axis] as f64;
        let t = self.reduce_axis(a, axis, 1.0 / n);
        self.push("mean_axis", t, Op::MeanAxis(a, axis), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_inputs("sum_all", &[a])?;
        let s: f64 = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check_inputs("concat", inputs)?;
        let first = match inputs.first() {
            Some(&v) => v,
            None => {
                return Err(AdError::InvalidAttr {
                    op: "concat",
                    detail: "no inputs".into(),
                })
            }
        };
        self.check_axis("concat", first, axis)?;
        let base = self.value(first).shape().to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let same_rest = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat(inputs.to_vec(), axis),
            inputs,
        )
    }

    fn gather_impl(&mut self, name: &'static str, a: Var, idx: &[usize], sign: f64) -> Result<Var> {
        self.check_inputs(name, &[a])?;
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(AdError::InvalidShape {
                op: name,
                shape: s.to_vec(),
                detail: format!("expected [{}, C]", idx.len()),
            });
        }
        let c = s[1];
        let mut data = Vec::with_capacity(idx.len());
        for (i, &k) in idx.iter().enumerate() {
            if k >= c {
                return Err(AdError::IndexOutOfRange {
                    op: name,
                    index: k,
                    extent: c,
                });
            }
            data.push(sign * ta.data()[i * c + k]);
        }
        self.push(
            name,
            Tensor::from_parts(vec![idx.len()], data),
            Op::Gather(a, idx.to_vec(), sign),
            &[a],
        )
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.gather_impl("gather", a, idx, 1.0)
    }

    /// `out[i] = -logp[i, idx[i]]`.
    pub fn nll_gather(&mut self, logp: Var, idx: &[usize]) -> Result<Var> {
        self.gather_impl("nll_gather", logp, idx, -1.0)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_inputs("reshape", &[a])?;
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check_inputs("slice_last", &[a])?;
        let ta = self.value(a);
        let s = ta.shape();
        let c = *s.last().unwrap_or(&0);
        if len == 0 || start + len > c {
            return Err(AdError::InvalidAttr {
                op: "slice_last",
                detail: format!("range {start}..{} outside last extent {c}", start + len),
            });
        }
        let data: Vec<f64> = ta
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = len;
        self.push(
            "slice_last",
            Tensor::from_parts(shape, data),
            Op::SliceLast(a, start),
            &[a],
        )
    }

    // Convenience compositions.

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    /// Reverse sweep from a scalar `loss`, accumulating `d loss / d p` into
    /// every non-frozen parameter recorded on this tape. A tape supports
    /// exactly one backward pass.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.consumed {
            return Err(AdError::TapeConsumed);
        }
        let loss_shape = self.node(loss)?.value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AdError::NotScalar(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.idx as usize] = Some(Tensor::from_parts(loss_shape, vec![1.0]));

        for i in (0..=loss.idx as usize).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, delta: Tensor| {
                let slot = &mut grads[v.idx as usize];
                match slot {
                    Some(t) => t.add_assign(&delta),
                    None => *slot = Some(delta),
                }
            };
            let val = |v: Var| &self.nodes[v.idx as usize].value;
            let need = |v: Var| self.nodes[v.idx as usize].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.accumulate_grad(*id, &g)?,
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if need(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), n, 1, tb.data(), 1, n, &mut da);
                        acc(*a, Tensor::from_parts(vec![m, k], da));
                    }
                    if need(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), 1, k, g.data(), n, 1, &mut db);
                        acc(*b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if need(*b) {
                        let bs = val(*b).shape().to_vec();
                        let bl = val(*b).len();
                        let mut db = vec![0.0; bl];
                        for chunk in g.data().chunks(bl) {
                            for (d, x) in db.iter_mut().zip(chunk) {
                                *d += sign * x;
                            }
                        }
                        acc(*b, Tensor::from_parts(bs, db));
                    }
                    if need(*a) {
                        acc(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let bl = tb.len();
                    if need(*a) {
                        let da: Vec<f64> = g
                            .data()
                            .chunks(bl)
                            .flat_map(|ch| ch.iter().zip(tb.data()).map(|(x, y)| x * y))
                            .collect();
                        acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                    }
                    if need(*b) {
                        let mut db = vec![0.0; bl];
                        for (gc, ac) in g.data().chunks(bl).zip(ta.data().chunks(bl)) {
                            for ((d, x), y) in db.iter_mut().zip(gc).zip(ac) {
                                *d += x * y;
                            }
                        }
                        acc(*b, Tensor::from_parts(tb.shape().to_vec(), db));
                    }
                }
                Op::Min(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let shape = ta.shape().to_vec();
                    let to_a: Vec<bool> =
                        ta.data().iter().zip(tb.data()).map(|(x, y)| x <= y).collect();
                    if need(*b) {
                        let db = g
                            .data()
                            .iter()
                            .zip(&to_a)
                            .map(|(x, &t)| if t { 0.0 } else { *x })
                            .collect();
                        acc(*b, Tensor::from_parts(shape.clone(), db));
                    }
                    if need(*a) {
                        let da = g
                            .data()
                            .iter()
                            .zip(&to_a)
                            .map(|(x, &t)| if t { *x } else { 0.0 })
                            .collect();
                        acc(*a, Tensor::from_parts(shape, da));
                    }
                }
                Op::Scale(a, c) => {
                    let mut g = g;
                    for v in g.data_mut() {
                        *v *= c;
                    }
                    acc(*a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = g;
                    for (d, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    acc(*a, g);
                }
                Op::Tanh(a) => {
                    let mut g = g;
                    for (d, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    acc(*a, g);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    for (d, x) in g.data_mut().iter_mut().zip(val(*a).data()) {
                        if *x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(*a, g);
                }
                Op::Exp(a) => {
                    let mut g = g;
                    for (d, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y;
                    }
                    acc(*a, g);
                }
                Op::Softmax(a) => {
                    let c = *node.value.shape().last().unwrap();
                    let mut g = g;
                    for (gr, yr) in g.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for (d, y) in gr.iter_mut().zip(yr) {
                            *d = y * (*d - dot);
                        }
                    }
                    acc(*a, g);
                }
                Op::LogSoftmax(a) => {
                    let c = *node.value.shape().last().unwrap();
                    let mut g = g;
                    for (gr, yr) in g.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for (d, y) in gr.iter_mut().zip(yr) {
                            *d -= y.exp() * s;
                        }
                    }
                    acc(*a, g);
                }
                Op::Embedding { table, indices } => {
                    let tt = val(*table);
                    let d = tt.shape()[1];
                    let mut dt = vec![0.0; tt.len()];
                    for (r, &ix) in indices.iter().enumerate() {
                        for (o, x) in dt[ix * d..(ix + 1) * d]
                            .iter_mut()
                            .zip(&g.data()[r * d..(r + 1) * d])
                        {
                            *o += x;
                        }
                    }
                    acc(*table, Tensor::from_parts(tt.shape().to_vec(), dt));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    stride,
                    cols,
                } => {
                    let (ti, tk) = (val(*input), val(*kernel));
                    let (w, c) = (ti.shape()[1], ti.shape()[2]);
                    let (kh, kw, o) = (tk.shape()[0], tk.shape()[1], tk.shape()[3]);
                    let (ho, wo) = (node.value.shape()[0], node.value.shape()[1]);
                    let patch = kh * kw * c;
                    let p = ho * wo;
                    if need(*kernel) {
                        let mut dk = vec![0.0; patch * o];
                        gemm(patch, p, o, cols, 1, patch, g.data(), o, 1, &mut dk);
                        acc(*kernel, Tensor::from_parts(tk.shape().to_vec(), dk));
                    }
                    if need(*input) {
                        let mut dcols = vec![0.0; p * patch];
                        gemm(p, o, patch, g.data(), o, 1, tk.data(), 1, o, &mut dcols);
                        let mut dx = vec![0.0; ti.len()];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let row = &dcols[(oy * wo + ox) * patch..(oy * wo + ox + 1) * patch];
                                let mut q = 0;
                                for dy in 0..kh {
                                    let base = ((oy * stride + dy) * w + ox * stride) * c;
                                    for (d, s) in dx[base..base + kw * c]
                                        .iter_mut()
                                        .zip(&row[q..q + kw * c])
                                    {
                                        *d += s;
                                    }
                                    q += kw * c;
                                }
                            }
                        }
                        acc(*input, Tensor::from_parts(ti.shape().to_vec(), dx));
                    }
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let ta = val(*a);
                    let (outer, ax, inner) = split_axis(ta.shape(), *axis);
                    let f = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / ax as f64
                    } else {
                        1.0
                    };
                    let mut da = vec![0.0; ta.len()];
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for k in 0..ax {
                            for (d, s) in da[(o * ax + k) * inner..(o * ax + k + 1) * inner]
                                .iter_mut()
                                .zip(src)
                            {
                                *d = s * f;
                            }
                        }
                    }
                    acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                Op::SumAll(a) => {
                    let ta = val(*a);
                    acc(*a, Tensor::full(ta.shape(), g.item()));
                }
                Op::Concat(inputs, axis) => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut off = 0;
                    for &v in inputs {
                        let tv = val(v);
                        let wv = tv.shape()[*axis] * inner;
                        if need(v) {
                            let mut dv = Vec::with_capacity(tv.len());
                            for o in 0..outer {
                                let start = o * total * inner + off;
                                dv.extend_from_slice(&g.data()[start..start + wv]);
                            }
                            acc(v, Tensor::from_parts(tv.shape().to_vec(), dv));
                        }
                        off += wv;
                    }
                }
                Op::Gather(a, idx, sign) => {
                    let ta = val(*a);
                    let c = ta.shape()[1];
                    let mut da = vec![0.0; ta.len()];
                    for (i, &k) in idx.iter().enumerate() {
                        da[i * c + k] = sign * g.data()[i];
                    }
                    acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                Op::Reshape(a) => {
                    let s = val(*a).shape().to_vec();
                    acc(*a, Tensor::from_parts(s, g.into_data()));
                }
                Op::SliceLast(a, start) => {
                    let ta = val(*a);
                    let c = *ta.shape().last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let mut da = vec![0.0; ta.len()];
                    for (dr, gr) in da.chunks_mut(c).zip(g.data().chunks(len)) {
                        dr[*start..start + len].copy_from_slice(gr);
                    }
                    acc(*a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(vec_t(&[0.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = t.constant(Tensor::ones(&[3, 1])).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn conv_output_shape_for_cell_grid() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[30, 30, 3])).unwrap();
        let k = t.constant(Tensor::zeros(&[10, 10, 3, 64])).unwrap();
        let y = t.conv2d(x, k, 10).unwrap();
        assert_eq!(t.value(y).shape(), &[3, 3, 64]);
        assert!(t.conv2d(x, k, 0).is_err());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = t.constant(Tensor::ones(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AdError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut t = Tape::with_checks(true);
        let err = t.constant(vec_t(&[1.0, f64::NAN])).unwrap_err();
        assert_eq!(err, AdError::NonFinite { op: "constant" });
        let mut t = Tape::with_checks(true);
        let a = t.constant(vec_t(&[1000.0])).unwrap();
        assert!(t.exp(a).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", vec_t(&[1.0, 2.0]));
        let mut t = Tape::new();
        let x = t.param(&ps, id).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad(id).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn log_softmax_pick_gradient_is_onehot_minus_softmax() {
        let xs = [0.3, -1.2, 2.0, 0.5];
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::new(vec![1, 4], xs.to_vec()).unwrap());
        let mut t = Tape::new();
        let x = t.param(&ps, id).unwrap();
        let lp = t.log_softmax(x).unwrap();
        let pick = t.gather(lp, &[2]).unwrap();
        let loss = t.sum_all(pick).unwrap();
        t.backward(loss, &mut ps).unwrap();
        let z: f64 = xs.iter().map(|v: &f64| v.exp()).sum();
        for (k, g) in ps.grad(id).unwrap().data().iter().enumerate() {
            let want = if k == 2 { 1.0 } else { 0.0 } - xs[k].exp() / z;
            assert!((g - want).abs() < 1e-14);
        }
    }

    #[test]
    fn tape_is_single_use() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", vec_t(&[1.0]));
        let mut t = Tape::new();
        let x = t.param(&ps, id).unwrap();
        let l = t.sum_all(x).unwrap();
        t.backward(l, &mut ps).unwrap();
        assert_eq!(t.backward(l, &mut ps), Err(AdError::TapeConsumed));
        assert_eq!(t.sum_all(x).unwrap_err(), AdError::TapeConsumed);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", vec_t(&[1.0, 2.0]));
        let mut t = Tape::new();
        let x = t.param(&ps, id).unwrap();
        assert_eq!(t.backward(x, &mut ps), Err(AdError::NotScalar(vec![2])));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", vec_t(&[1.0, 2.0]));
        ps.set_frozen(id, true);
        let mut t = Tape::new();
        let x = t.param(&ps, id).unwrap();
        let l = t.sum_all(x).unwrap();
        t.backward(l, &mut ps).unwrap();
        assert!(ps.grad(id).is_none());
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.constant(vec_t(&[1.0])).unwrap();
        assert_eq!(t2.tanh(a).unwrap_err(), AdError::ForeignVar);
    }

    #[test]
    fn reuse_accumulates_gradients() {
        // f(x) = sum(x * w) + sum(tanh(x)); grads from both uses add up
        let mut ps = ParamSet::new();
        let id = ps.add("x", vec_t(&[0.2, -0.7]));
        let w = vec_t(&[1.5, 2.5]);
        let mut t = Tape::new();
        let x = t.param(&ps, id).unwrap();
        let wc = t.constant(w.clone()).unwrap();
        let a = t.mul(x, wc).unwrap();
        let a = t.sum_all(a).unwrap();
        let b = t.tanh(x).unwrap();
        let b = t.sum_all(b).unwrap();
        let l = t.add(a, b).unwrap();
        t.backward(l, &mut ps).unwrap();
        let both = ps.grad(id).unwrap().clone();

        let mut ps1 = ParamSet::new();
        let id1 = ps1.add("x", vec_t(&[0.2, -0.7]));
        let mut t = Tape::new();
        let x = t.param(&ps1, id1).unwrap();
        let wc = t.constant(w).unwrap();
        let a = t.mul(x, wc).unwrap();
        let a = t.sum_all(a).unwrap();
        t.backward(a, &mut ps1).unwrap();
        let mut t = Tape::new();
        let x = t.param(&ps1, id1).unwrap();
        let b = t.tanh(x).unwrap();
        let b = t.sum_all(b).unwrap();
        t.backward(b, &mut ps1).unwrap();
        assert_eq!(ps1.grad(id1).unwrap(), &both);
    }
}
