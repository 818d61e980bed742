//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape: every operation records its operands
//! and enough state to run its backward rule, and topological order equals
//! insertion order. Graphs are rebuilt each training step and confined to one
//! thread; parallelism happens above this module by running independent
//! graphs on disjoint data and reducing results in a fixed order.
//!
//! Everything is 64-bit: finite-difference checks at 1e-4 relative tolerance
//! are not reliable in f32, and the scenes this crate trains on are small
//! enough that the cost does not matter.

mod mm;

pub mod checkpoint;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rank-{0} tensors are not supported on the graph (max rank 2)")]
    RankUnsupported(usize),
    #[error("backward root must be scalar, got {rows}x{cols}")]
    RootNotScalar { rows: usize, cols: usize },
    #[error("gradient length {len} does not match tensor length {expected}")]
    GradLength { len: usize, expected: usize },
    #[error("invalid {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense n-dimensional value with an optional gradient slot.
///
/// `Tensor` is the at-rest form of every learnable quantity: the trainer owns
/// parameters as tensors, copies them onto a fresh [`Graph`] each step, and
/// accumulates the resulting leaf gradients back into the `grad` slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::LengthMismatch { shape, len: data.len() });
        }
        if !all_finite(&data) {
            return Err(AutodiffError::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::from_vec(vec![], vec![value])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer updates; callers that may have written
    /// non-finite values must re-validate via [`Tensor::validate`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn validate(&self) -> Result<()> {
        if all_finite(&self.data) {
            Ok(())
        } else {
            Err(AutodiffError::NonFinite { op: "tensor" })
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(AutodiffError::GradLength { len: delta.len(), expected: self.data.len() });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Maps the tensor onto the graph's 2D layout: scalars are 1x1 and
    /// rank-1 tensors are row vectors.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            r => Err(AutodiffError::RankUnsupported(r)),
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// The differentiable primitives the tape understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveOp {
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Softplus,
    Sum,
    Mean,
    Square,
    Concat,
    Broadcast,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Matmul(Value, Value),
    Exp(Value),
    Log(Value),
    Relu(Value),
    Sigmoid(Value),
    Softplus(Value),
    Square(Value),
    Sum(Value),
    Mean(Value),
    ConcatCols(Value, Value),
    ConcatRows(Value, Value),
    Broadcast(Value),
    SliceRows(Value, usize),
    Linear { x: Value, w: Value, b: Value, relu: bool },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Matmul(..) => "matmul",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatCols(..) | Op::ConcatRows(..) => "concat",
            Op::Broadcast(..) => "broadcast",
            Op::SliceRows(..) => "slice_rows",
            Op::Linear { .. } => "linear",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// How a binary operand lines up against the output shape.
#[derive(Clone, Copy, PartialEq)]
enum Align {
    Full,
    Scalar,
    Row,
    Col,
}

/// Finiteness scan expressed as an integer max-reduction so it vectorizes;
/// Inf and NaN both carry an all-ones exponent field.
fn all_finite(data: &[f64]) -> bool {
    const EXP_MASK: u64 = 0x7FF0_0000_0000_0000;
    let mut lanes = [0u64; 8];
    let mut chunks = data.chunks_exact(8);
    for chunk in &mut chunks {
        for (lane, v) in lanes.iter_mut().zip(chunk) {
            *lane = (*lane).max(v.to_bits() & EXP_MASK);
        }
    }
    let mut m = lanes.into_iter().max().unwrap_or(0);
    for v in chunks.remainder() {
        m = m.max(v.to_bits() & EXP_MASK);
    }
    m != EXP_MASK
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow on either tail
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Append-only operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor) -> Result<Value> {
        let (rows, cols) = tensor.dims2()?;
        tensor.validate()?;
        Ok(self.push(rows, cols, tensor.data().to_vec(), Op::Leaf, tensor.requires_grad()))
    }

    /// Non-differentiable constant leaf given directly as a 2D buffer.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Value> {
        if data.len() != rows * cols {
            return Err(AutodiffError::LengthMismatch { shape: vec![rows, cols], len: data.len() });
        }
        if !all_finite(&data) {
            return Err(AutodiffError::NonFinite { op: "constant" });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Value> {
        self.constant(1, 1, vec![value])
    }

    pub fn shape(&self, v: Value) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` root with respect to node `v`.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node { rows, cols, data, grad: None, needs_grad, op });
        Value(self.nodes.len() - 1)
    }

    fn finish_op(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Result<Value> {
        if !all_finite(&data) {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        Ok(self.push(rows, cols, data, op, needs_grad))
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Resolves the output shape and operand alignments of a binary op.
    /// Equal shapes, or a scalar / matching row / matching column against a
    /// matrix, are the only supported combinations; the field networks and
    /// renderer need nothing richer.
    fn align(&self, op: &'static str, a: Value, b: Value) -> Result<(usize, usize, Align, Align)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) == (br, bc) {
            return Ok((ar, ac, Align::Full, Align::Full));
        }
        if (br, bc) == (1, 1) {
            return Ok((ar, ac, Align::Full, Align::Scalar));
        }
        if (ar, ac) == (1, 1) {
            return Ok((br, bc, Align::Scalar, Align::Full));
        }
        if br == 1 && bc == ac {
            return Ok((ar, ac, Align::Full, Align::Row));
        }
        if ar == 1 && ac == bc {
            return Ok((br, bc, Align::Row, Align::Full));
        }
        if bc == 1 && br == ar {
            return Ok((ar, ac, Align::Full, Align::Col));
        }
        if ac == 1 && ar == br {
            return Ok((br, bc, Align::Col, Align::Full));
        }
        Err(AutodiffError::ShapeMismatch { op, lhs: (ar, ac), rhs: (br, bc) })
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Value,
        b: Value,
        op: impl Fn(Value, Value) -> Op,
        f: impl Fn(f64, f64) -> f64 + Copy,
    ) -> Result<Value> {
        let (rows, cols, aa, ba) = self.align(name, a, b)?;
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(rows * cols);
        match (aa, ba) {
            (Align::Full, Align::Full) => {
                out.extend(av.iter().zip(bv).map(|(x, y)| f(*x, *y)));
            }
            (Align::Full, Align::Scalar) => {
                let s = bv[0];
                out.extend(av.iter().map(|x| f(*x, s)));
            }
            (Align::Scalar, Align::Full) => {
                let s = av[0];
                out.extend(bv.iter().map(|y| f(s, *y)));
            }
            (Align::Full, Align::Row) => {
                for i in 0..rows {
                    let arow = &av[i * cols..(i + 1) * cols];
                    out.extend(arow.iter().zip(bv).map(|(x, y)| f(*x, *y)));
                }
            }
            (Align::Row, Align::Full) => {
                for i in 0..rows {
                    let brow = &bv[i * cols..(i + 1) * cols];
                    out.extend(av.iter().zip(brow).map(|(x, y)| f(*x, *y)));
                }
            }
            (Align::Full, Align::Col) => {
                for i in 0..rows {
                    let y = bv[i];
                    let arow = &av[i * cols..(i + 1) * cols];
                    out.extend(arow.iter().map(|x| f(*x, y)));
                }
            }
            (Align::Col, Align::Full) => {
                for i in 0..rows {
                    let x = av[i];
                    let brow = &bv[i * cols..(i + 1) * cols];
                    out.extend(brow.iter().map(|y| f(x, *y)));
                }
            }
            _ => unreachable!("align never returns other combinations"),
        }
        let needs = self.needs(a) || self.needs(b);
        self.finish_op(rows, cols, out, op(a, b), needs)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(AutodiffError::ShapeMismatch { op: "matmul", lhs: (m, ka), rhs: (kb, n) });
        }
        let mut out = vec![0.0; m * n];
        mm::mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        self.finish_op(m, n, out, Op::Matmul(a, b), needs)
    }

    /// Fused dense layer: `x @ w + b` with `b` broadcast across rows,
    /// optionally through relu. One node instead of three keeps the big
    /// activation buffers (and their gradients) off the tape.
    pub fn linear(&mut self, x: Value, w: Value, b: Value, relu: bool) -> Result<Value> {
        let (m, kx) = self.shape(x);
        let (kw, n) = self.shape(w);
        if kx != kw {
            return Err(AutodiffError::ShapeMismatch { op: "linear", lhs: (m, kx), rhs: (kw, n) });
        }
        let (br, bc) = self.shape(b);
        if !(br == 1 && bc == n) {
            return Err(AutodiffError::ShapeMismatch { op: "linear", lhs: (m, n), rhs: (br, bc) });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&self.nodes[b.0].data);
        }
        mm::mm_nn(&self.nodes[x.0].data, &self.nodes[w.0].data, &mut out, m, kx, n);
        if relu {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.finish_op(m, n, out, Op::Linear { x, w, b, relu }, needs)
    }

    fn unary(
        &mut self,
        a: Value,
        op: impl Fn(Value) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Value> {
        let (rows, cols) = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| f(*x)).collect();
        let needs = self.needs(a);
        self.finish_op(rows, cols, out, op(a), needs)
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Sigmoid, stable_sigmoid)
    }

    pub fn softplus(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Softplus, stable_softplus)
    }

    pub fn square(&mut self, a: Value) -> Result<Value> {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.finish_op(1, 1, vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Value) -> Result<Value> {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.finish_op(1, 1, vec![s / n], Op::Mean(a), needs)
    }

    /// Concatenates along columns: [a | b].
    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: (ar, ac), rhs: (br, bc) });
        }
        let cols = ac + bc;
        let mut out = Vec::with_capacity(ar * cols);
        for i in 0..ar {
            out.extend_from_slice(&self.nodes[a.0].data[i * ac..(i + 1) * ac]);
            out.extend_from_slice(&self.nodes[b.0].data[i * bc..(i + 1) * bc]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.finish_op(ar, cols, out, Op::ConcatCols(a, b), needs)
    }

    /// Concatenates along rows: [a; b].
    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: (ar, ac), rhs: (br, bc) });
        }
        let mut out = Vec::with_capacity((ar + br) * ac);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        let needs = self.needs(a) || self.needs(b);
        self.finish_op(ar + br, ac, out, Op::ConcatRows(a, b), needs)
    }

    /// Materializes a scalar, row or column as a full `rows x cols` matrix.
    pub fn broadcast_to(&mut self, a: Value, rows: usize, cols: usize) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        let src = &self.nodes[a.0].data;
        let out = if (ar, ac) == (1, 1) {
            vec![src[0]; rows * cols]
        } else if ar == 1 && ac == cols {
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                out.extend_from_slice(src);
            }
            out
        } else if ac == 1 && ar == rows {
            let mut out = Vec::with_capacity(rows * cols);
            for i in 0..rows {
                out.extend(std::iter::repeat(src[i]).take(cols));
            }
            out
        } else {
            return Err(AutodiffError::ShapeMismatch { op: "broadcast", lhs: (ar, ac), rhs: (rows, cols) });
        };
        let needs = self.needs(a);
        self.finish_op(rows, cols, out, Op::Broadcast(a), needs)
    }

    /// Broadcasts `a` to the shape of `like`.
    pub fn broadcast_like(&mut self, a: Value, like: Value) -> Result<Value> {
        let (rows, cols) = self.shape(like);
        self.broadcast_to(a, rows, cols)
    }

    /// Contiguous row window `[start, start + rows)` of `a`.
    pub fn slice_rows(&mut self, a: Value, start: usize, rows: usize) -> Result<Value> {
        let (ar, ac) = self.shape(a);
        if start + rows > ar {
            return Err(AutodiffError::Invalid {
                op: "slice_rows",
                msg: format!("window {start}..{} out of {ar} rows", start + rows),
            });
        }
        let out = self.nodes[a.0].data[start * ac..(start + rows) * ac].to_vec();
        let needs = self.needs(a);
        self.finish_op(rows, ac, out, Op::SliceRows(a, start), needs)
    }

    /// Single-entry dispatch over the primitive op set. `Broadcast` treats
    /// its second operand as a shape donor; `Concat` joins columns.
    pub fn apply(&mut self, op: PrimitiveOp, operands: &[Value]) -> Result<Value> {
        let want = match op {
            PrimitiveOp::Exp
            | PrimitiveOp::Log
            | PrimitiveOp::Relu
            | PrimitiveOp::Sigmoid
            | PrimitiveOp::Softplus
            | PrimitiveOp::Sum
            | PrimitiveOp::Mean
            | PrimitiveOp::Square => 1,
            _ => 2,
        };
        if operands.len() != want {
            return Err(AutodiffError::Invalid {
                op: "apply",
                msg: format!("{op:?} expects {want} operands, got {}", operands.len()),
            });
        }
        match op {
            PrimitiveOp::Add => self.add(operands[0], operands[1]),
            PrimitiveOp::Sub => self.sub(operands[0], operands[1]),
            PrimitiveOp::Mul => self.mul(operands[0], operands[1]),
            PrimitiveOp::Div => self.div(operands[0], operands[1]),
            PrimitiveOp::Matmul => self.matmul(operands[0], operands[1]),
            PrimitiveOp::Exp => self.exp(operands[0]),
            PrimitiveOp::Log => self.log(operands[0]),
            PrimitiveOp::Relu => self.relu(operands[0]),
            PrimitiveOp::Sigmoid => self.sigmoid(operands[0]),
            PrimitiveOp::Softplus => self.softplus(operands[0]),
            PrimitiveOp::Sum => self.sum(operands[0]),
            PrimitiveOp::Mean => self.mean(operands[0]),
            PrimitiveOp::Square => self.square(operands[0]),
            PrimitiveOp::Concat => self.concat_cols(operands[0], operands[1]),
            PrimitiveOp::Broadcast => self.broadcast_like(operands[0], operands[1]),
        }
    }

    /// Reverse pass from a scalar root. Every `requires_grad` leaf reachable
    /// from `root` ends up with `grad = d root / d leaf`; gradients
    /// accumulate additively across fan-out.
    pub fn backward(&mut self, root: Value) -> Result<()> {
        let (rows, cols) = self.shape(root);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::RootNotScalar { rows, cols });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].needs_grad {
            // nothing differentiable feeds the root
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let grad = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(idx, &op, &grad)?;
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, idx: usize, op: &Op, grad: &[f64]) -> Result<()> {
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_plain(a, rows, cols, grad, false);
                self.acc_plain(b, rows, cols, grad, false);
            }
            Op::Sub(a, b) => {
                self.acc_plain(a, rows, cols, grad, false);
                self.acc_plain(b, rows, cols, grad, true);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.acc_times_operand(a, b, rows, cols, grad);
                }
                if self.needs(b) {
                    self.acc_times_operand(b, a, rows, cols, grad);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    // d/da (a/b) = 1/b
                    let mut ga = self.take_grad(a);
                    {
                        let bd = &self.nodes[b.0].data;
                        match self.align_of(a, rows, cols) {
                            Align::Full => match self.align_of(b, rows, cols) {
                                Align::Full => {
                                    for ((g, out), y) in ga.iter_mut().zip(grad).zip(bd) {
                                        *g += out / y;
                                    }
                                }
                                align => {
                                    for i in 0..rows {
                                        for j in 0..cols {
                                            let y = bd[Self::pick(align, i, j, cols)];
                                            ga[i * cols + j] += grad[i * cols + j] / y;
                                        }
                                    }
                                }
                            },
                            a_align => {
                                // a broadcast means b is full
                                for i in 0..rows {
                                    for j in 0..cols {
                                        let src = i * cols + j;
                                        ga[Self::pick(a_align, i, j, cols)] += grad[src] / bd[src];
                                    }
                                }
                            }
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    // d/db (a/b) = -a / b^2
                    let mut gb = self.take_grad(b);
                    {
                        let ad = &self.nodes[a.0].data;
                        let bd = &self.nodes[b.0].data;
                        let a_align = self.align_of(a, rows, cols);
                        let b_align = self.align_of(b, rows, cols);
                        if a_align == Align::Full && b_align == Align::Full {
                            for i in 0..gb.len() {
                                gb[i] += -grad[i] * ad[i] / (bd[i] * bd[i]);
                            }
                        } else {
                            for i in 0..rows {
                                for j in 0..cols {
                                    let src = i * cols + j;
                                    let x = ad[Self::pick(a_align, i, j, cols)];
                                    let y = bd[Self::pick(b_align, i, j, cols)];
                                    gb[Self::pick(b_align, i, j, cols)] += -grad[src] * x / (y * y);
                                }
                            }
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    mm::mm_nt(grad, &self.nodes[b.0].data, &mut ga, m, k, n);
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    mm::mm_tn(&self.nodes[a.0].data, grad, &mut gb, m, k, n);
                    self.put_grad(b, gb);
                }
            }
            Op::Exp(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((g, out), y) in ga.iter_mut().zip(grad).zip(&self.nodes[idx].data) {
                        *g += out * y;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((g, out), x) in ga.iter_mut().zip(grad).zip(&self.nodes[a.0].data) {
                        *g += out / x;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Relu(a) => {
                // subgradient at 0 is 0
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((g, out), x) in ga.iter_mut().zip(grad).zip(&self.nodes[a.0].data) {
                        if *x > 0.0 {
                            *g += out;
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((g, out), y) in ga.iter_mut().zip(grad).zip(&self.nodes[idx].data) {
                        *g += out * y * (1.0 - y);
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Softplus(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((g, out), x) in ga.iter_mut().zip(grad).zip(&self.nodes[a.0].data) {
                        *g += out * stable_sigmoid(*x);
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Square(a) => {
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for ((g, out), x) in ga.iter_mut().zip(grad).zip(&self.nodes[a.0].data) {
                        *g += 2.0 * out * x;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    let g = grad[0];
                    let mut ga = self.take_grad(a);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Mean(a) => {
                if self.needs(a) {
                    let n = self.nodes[a.0].data.len() as f64;
                    let g = grad[0] / n;
                    let mut ga = self.take_grad(a);
                    for v in ga.iter_mut() {
                        *v += g;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::ConcatCols(a, b) => {
                let (_, ac) = self.shape(a);
                let (_, bc) = self.shape(b);
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..rows {
                        let dst = &mut ga[i * ac..(i + 1) * ac];
                        let src = &grad[i * cols..i * cols + ac];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    for i in 0..rows {
                        let dst = &mut gb[i * bc..(i + 1) * bc];
                        let src = &grad[i * cols + ac..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::ConcatRows(a, b) => {
                let (ar, _) = self.shape(a);
                if self.needs(a) {
                    let mut ga = self.take_grad(a);
                    for (g, s) in ga.iter_mut().zip(&grad[..ar * cols]) {
                        *g += s;
                    }
                    self.put_grad(a, ga);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    for (g, s) in gb.iter_mut().zip(&grad[ar * cols..]) {
                        *g += s;
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Broadcast(a) => {
                self.acc_plain(a, rows, cols, grad, false);
            }
            Op::SliceRows(a, start) => {
                if self.needs(a) {
                    let (_, ac) = self.shape(a);
                    let mut ga = self.take_grad(a);
                    for (g, s) in ga[start * ac..start * ac + grad.len()].iter_mut().zip(grad) {
                        *g += s;
                    }
                    self.put_grad(a, ga);
                }
            }
            Op::Linear { x, w, b, relu } => {
                let (m, k) = self.shape(x);
                let (_, n) = self.shape(w);
                // upstream through the (optional) relu; out > 0 iff pre > 0
                let dpre: std::borrow::Cow<[f64]> = if relu {
                    let out = &self.nodes[idx].data;
                    std::borrow::Cow::Owned(
                        grad.iter().zip(out).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect(),
                    )
                } else {
                    std::borrow::Cow::Borrowed(grad)
                };
                if self.needs(x) {
                    let mut gx = self.take_grad(x);
                    mm::mm_nt(&dpre, &self.nodes[w.0].data, &mut gx, m, k, n);
                    self.put_grad(x, gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_grad(w);
                    mm::mm_tn(&self.nodes[x.0].data, &dpre, &mut gw, m, k, n);
                    self.put_grad(w, gw);
                }
                if self.needs(b) {
                    let mut gb = self.take_grad(b);
                    for i in 0..m {
                        let row = &dpre[i * n..(i + 1) * n];
                        for (g, s) in gb.iter_mut().zip(row) {
                            *g += s;
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer of `v`, zero-allocated on first use.
    fn take_grad(&mut self, v: Value) -> Vec<f64> {
        let len = self.nodes[v.0].data.len();
        self.nodes[v.0].grad.take().unwrap_or_else(|| vec![0.0; len])
    }

    fn put_grad(&mut self, v: Value, grad: Vec<f64>) {
        self.nodes[v.0].grad = Some(grad);
    }

    /// Alignment of operand `v` against an output of shape `rows x cols`.
    fn align_of(&self, v: Value, rows: usize, cols: usize) -> Align {
        let (vr, vc) = self.shape(v);
        if (vr, vc) == (rows, cols) {
            Align::Full
        } else if (vr, vc) == (1, 1) {
            Align::Scalar
        } else if vr == 1 {
            Align::Row
        } else {
            Align::Col
        }
    }

    fn pick(align: Align, i: usize, j: usize, cols: usize) -> usize {
        match align {
            Align::Full => i * cols + j,
            Align::Scalar => 0,
            Align::Row => j,
            Align::Col => i,
        }
    }

    /// `grad_v += (+/-) grad`, reducing over broadcast dimensions.
    fn acc_plain(&mut self, v: Value, rows: usize, cols: usize, grad: &[f64], negate: bool) {
        if !self.needs(v) {
            return;
        }
        let sign = if negate { -1.0 } else { 1.0 };
        let align = self.align_of(v, rows, cols);
        let mut gv = self.take_grad(v);
        match align {
            Align::Full => {
                if negate {
                    for (g, s) in gv.iter_mut().zip(grad) {
                        *g -= s;
                    }
                } else {
                    for (g, s) in gv.iter_mut().zip(grad) {
                        *g += s;
                    }
                }
            }
            Align::Scalar => {
                let mut total = 0.0;
                for s in grad {
                    total += s;
                }
                gv[0] += sign * total;
            }
            Align::Row => {
                for i in 0..rows {
                    let src = &grad[i * cols..(i + 1) * cols];
                    for (g, s) in gv.iter_mut().zip(src) {
                        *g += sign * s;
                    }
                }
            }
            Align::Col => {
                for i in 0..rows {
                    let mut total = 0.0;
                    for s in &grad[i * cols..(i + 1) * cols] {
                        total += s;
                    }
                    gv[i] += sign * total;
                }
            }
        }
        self.put_grad(v, gv);
    }

    /// Mul backward for one side: `grad_v += grad * other`, where either
    /// side may be broadcast-aligned.
    fn acc_times_operand(&mut self, v: Value, other: Value, rows: usize, cols: usize, grad: &[f64]) {
        let v_align = self.align_of(v, rows, cols);
        let o_align = self.align_of(other, rows, cols);
        let mut gv = self.take_grad(v);
        {
            let od = &self.nodes[other.0].data;
            match (v_align, o_align) {
                (Align::Full, Align::Full) => {
                    for ((g, s), o) in gv.iter_mut().zip(grad).zip(od) {
                        *g += s * o;
                    }
                }
                (Align::Full, Align::Scalar) => {
                    let o = od[0];
                    for (g, s) in gv.iter_mut().zip(grad) {
                        *g += s * o;
                    }
                }
                (Align::Full, Align::Row) => {
                    for i in 0..rows {
                        let src = &grad[i * cols..(i + 1) * cols];
                        let dst = &mut gv[i * cols..(i + 1) * cols];
                        for ((g, s), o) in dst.iter_mut().zip(src).zip(od) {
                            *g += s * o;
                        }
                    }
                }
                (Align::Full, Align::Col) => {
                    for i in 0..rows {
                        let o = od[i];
                        let src = &grad[i * cols..(i + 1) * cols];
                        let dst = &mut gv[i * cols..(i + 1) * cols];
                        for (g, s) in dst.iter_mut().zip(src) {
                            *g += s * o;
                        }
                    }
                }
                // v is broadcast-aligned, so the other operand is full
                (v_align, _) => {
                    for i in 0..rows {
                        match v_align {
                            Align::Col => {
                                let mut total = 0.0;
                                for j in 0..cols {
                                    let src = i * cols + j;
                                    total += grad[src] * od[src];
                                }
                                gv[i] += total;
                            }
                            Align::Row => {
                                for j in 0..cols {
                                    let src = i * cols + j;
                                    gv[j] += grad[src] * od[src];
                                }
                            }
                            Align::Scalar => {
                                let mut total = 0.0;
                                for j in 0..cols {
                                    let src = i * cols + j;
                                    total += grad[src] * od[src];
                                }
                                gv[0] += total;
                            }
                            Align::Full => unreachable!(),
                        }
                    }
                }
            }
        }
        self.put_grad(v, gv);
    }

}

/// Max relative disagreement between analytic gradients of `f` at `x` and
/// central finite differences with the given step:
/// `max_i |analytic_i - fd_i| / max(1, |analytic_i|)`.
pub fn grad_check<F, E>(f: F, x: &Tensor, step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, Value) -> std::result::Result<Value, E>,
    E: From<AutodiffError>,
{
    let mut tracked = x.clone();
    tracked = tracked.with_grad();

    let mut graph = Graph::new();
    let leaf = graph.leaf(&tracked)?;
    let root = f(&mut graph, leaf)?;
    let (r, c) = graph.shape(root);
    if (r, c) != (1, 1) {
        return Err(AutodiffError::RootNotScalar { rows: r, cols: c }.into());
    }
    graph.backward(root)?;
    let analytic = match graph.grad(leaf) {
        Some(g) => g.to_vec(),
        None => {
            return Err(AutodiffError::Invalid {
                op: "grad_check",
                msg: "leaf has no gradient".into(),
            }
            .into())
        }
    };

    let eval = |data: &[f64]| -> std::result::Result<f64, E> {
        let probe = Tensor::from_vec(x.shape().to_vec(), data.to_vec())?;
        let mut g = Graph::new();
        let leaf = g.leaf(&probe)?;
        let out = f(&mut g, leaf)?;
        let y = g.value(out)[0];
        if !y.is_finite() {
            return Err(AutodiffError::NonFinite { op: "grad_check" }.into());
        }
        Ok(y)
    };

    let mut max_rel = 0.0f64;
    let mut data = x.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let hi = eval(&data)?;
        data[i] = orig - step;
        let lo = eval(&data)?;
        data[i] = orig;
        let fd = (hi - lo) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
