//! Dense f64 tensors and a Wengert-tape reverse-mode autodiff engine.
//!
//! The op set is exactly what the policy network needs: matmul, elementwise
//! arithmetic with leading-batch broadcasting, shape plumbing, softmax,
//! layer norm, the usual activations, reductions, embedding lookup, dropout
//! with an explicit mask, and masked fill. Tensors are immutable values;
//! a [`Tape`] records one forward pass and is consumed by one `backward`.

use std::sync::Arc;

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not on this tape")]
    Detached(usize),
    #[error("backward already called on this tape")]
    BackwardTwice,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
#[derive(serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r > 0 { rows[0].len() } else { 0 };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a 2-D tensor; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Operation kinds recordable on the tape.
///
/// Parameterized kinds carry their static arguments; masks are shared so
/// cloning a kind for the tape record stays cheap.
#[derive(Debug, Clone)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Transpose,
    Softmax(usize),
    LayerNorm { eps: f64 },
    Gelu,
    Tanh,
    Exp,
    Log,
    Softplus,
    Sum(Option<usize>),
    Mean(Option<usize>),
    EmbeddingLookup(Arc<Vec<usize>>),
    Dropout { p: f64, mask: Arc<Vec<bool>> },
    MaskedFill { mask: Arc<Vec<bool>>, value: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Softmax(_) => "softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softplus => "softplus",
            OpKind::Sum(_) => "sum",
            OpKind::Mean(_) => "mean",
            OpKind::EmbeddingLookup(_) => "embedding_lookup",
            OpKind::Dropout { .. } => "dropout",
            OpKind::MaskedFill { .. } => "masked_fill",
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Option<(OpKind, Vec<NodeId>)>,
}

/// Records a forward computation; topological order is insertion order.
pub struct Tape {
    nodes: Vec<Node>,
    backward_called: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_called: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Arc::new(value), requires_grad, None)
    }

    /// Leaf sharing storage with an existing tensor (parameters).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Arc<Tensor>, rg: bool, op: Option<(OpKind, Vec<NodeId>)>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            op,
        });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId, op: &'static str) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("input node {id} not on tape"),
            });
        }
        Ok(())
    }

    /// Applies `kind` to `inputs`, appending the result to the tape.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        for &id in inputs {
            self.check(id, kind.name())?;
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &*self.nodes[i].value).collect();
        let out = eval_forward(&kind, &vals)?;
        debug_assert!(
            !vals.iter().all(|v| v.is_finite()) || out.is_finite(),
            "non-finite output from {} on finite inputs",
            kind.name()
        );
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Arc::new(out), rg, Some((kind, inputs.to_vec()))))
    }

    // Convenience wrappers.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.forward_op(OpKind::Scale(c), &[a])
    }
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        self.forward_op(OpKind::Concat(axis), parts)
    }
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Slice { axis, start, len }, &[x])
    }
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.forward_op(OpKind::Reshape(shape), &[x])
    }
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Transpose, &[x])
    }
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Softmax(axis), &[x])
    }
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.forward_op(OpKind::LayerNorm { eps }, &[x])
    }
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Gelu, &[x])
    }
    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Tanh, &[x])
    }
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Exp, &[x])
    }
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Log, &[x])
    }
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Softplus, &[x])
    }
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sum(None), &[x])
    }
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Sum(Some(axis)), &[x])
    }
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mean(None), &[x])
    }
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.forward_op(OpKind::Mean(Some(axis)), &[x])
    }
    pub fn embedding(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.forward_op(OpKind::EmbeddingLookup(Arc::new(indices)), &[table])
    }
    pub fn dropout(&mut self, x: NodeId, p: f64, mask: Arc<Vec<bool>>) -> Result<NodeId> {
        self.forward_op(OpKind::Dropout { p, mask }, &[x])
    }
    pub fn masked_fill(&mut self, x: NodeId, mask: Arc<Vec<bool>>, value: f64) -> Result<NodeId> {
        self.forward_op(OpKind::MaskedFill { mask, value }, &[x])
    }

    /// Reverse pass from a scalar `loss` node. Consumes the tape's one
    /// backward budget; a second call errors.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        if self.backward_called {
            return Err(TensorError::BackwardTwice);
        }
        if loss >= self.nodes.len() {
            return Err(TensorError::Detached(loss));
        }
        let loss_val = &self.nodes[loss].value;
        if !loss_val.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_val.shape.clone()));
        }
        self.backward_called = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::new(loss_val.shape.clone(), vec![1.0]));

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let Some((kind, inputs)) = self.nodes[id].op.clone() else {
                continue;
            };
            let g = grads[id].clone().unwrap();
            let in_vals: Vec<Arc<Tensor>> =
                inputs.iter().map(|&i| self.nodes[i].value.clone()).collect();
            let out_val = self.nodes[id].value.clone();
            let in_grads = eval_backward(&kind, &g, &in_vals, &out_val);
            for (slot, grad) in inputs.iter().zip(in_grads) {
                if let Some(grad) = grad {
                    if self.nodes[*slot].requires_grad {
                        accumulate(&mut grads[*slot], grad);
                    }
                }
            }
        }
        Ok(Grads { by_node: grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            debug_assert_eq!(acc.shape, g.shape);
            for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                *a += b;
            }
        }
    }
}

// ── forward kernels ──────────────────────────────────────────────────

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape.clone(),
        rhs: rhs.shape.clone(),
    }
}

/// Broadcast relation for binary elementwise ops: identical shapes, or one
/// side is a 1-D row broadcast over the other's leading (batch) dimension.
enum Bcast {
    Same,
    /// lhs is [r, c], rhs is [c]
    RhsRow,
    /// lhs is [c], rhs is [r, c]
    LhsRow,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape == b.shape {
        return Ok(Bcast::Same);
    }
    if a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0] {
        return Ok(Bcast::RhsRow);
    }
    if a.rank() == 1 && b.rank() == 2 && b.shape[1] == a.shape[0] {
        return Ok(Bcast::LhsRow);
    }
    Err(shape_err(op, a, b))
}

fn ew2(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    match bcast(op, a, b)? {
        Bcast::Same => Ok(Tensor::new(
            a.shape.clone(),
            a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        )),
        Bcast::RhsRow => {
            let c = b.shape[0];
            let mut out = Vec::with_capacity(a.numel());
            for (i, x) in a.data.iter().enumerate() {
                out.push(f(*x, b.data[i % c]));
            }
            Ok(Tensor::new(a.shape.clone(), out))
        }
        Bcast::LhsRow => {
            let c = a.shape[0];
            let mut out = Vec::with_capacity(b.numel());
            for (i, y) in b.data.iter().enumerate() {
                out.push(f(a.data[i % c], *y));
            }
            Ok(Tensor::new(b.shape.clone(), out))
        }
    }
}

fn map1(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape.clone(), x.data.iter().map(|v| f(*v)).collect())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Iterate a 2-D (or 1-D, as one row) tensor as (row, col) lanes along `axis`.
/// Returns (n_lanes, lane_len, stride, lane_start_fn).
fn lanes(x: &Tensor, axis: usize, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match (x.rank(), axis) {
        (1, 0) => Ok((1, x.shape[0], 1, 0)),
        (2, 0) => Ok((x.shape[1], x.shape[0], x.shape[1], 1)), // down columns
        (2, 1) => Ok((x.shape[0], x.shape[1], 1, x.shape[1])), // along rows
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("axis {} invalid for shape {:?}", axis, x.shape),
        }),
    }
}

fn eval_forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity_ok = match kind {
        OpKind::Matmul | OpKind::Add | OpKind::Sub | OpKind::Mul => inputs.len() == 2,
        OpKind::Concat(_) => !inputs.is_empty(),
        _ => inputs.len() == 1,
    };
    if !arity_ok {
        return Err(TensorError::Invalid {
            op: kind.name(),
            msg: format!("wrong number of inputs: {}", inputs.len()),
        });
    }
    match kind {
        OpKind::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err("matmul", a, b));
            }
            Ok(matmul(a, b))
        }
        OpKind::Add => ew2("add", inputs[0], inputs[1], |x, y| x + y),
        OpKind::Sub => ew2("sub", inputs[0], inputs[1], |x, y| x - y),
        OpKind::Mul => ew2("mul", inputs[0], inputs[1], |x, y| x * y),
        OpKind::Scale(c) => Ok(map1(inputs[0], |x| c * x)),
        OpKind::Concat(axis) => concat(*axis, inputs),
        OpKind::Slice { axis, start, len } => slice(inputs[0], *axis, *start, *len),
        OpKind::Reshape(shape) => {
            let x = inputs[0];
            if shape.iter().product::<usize>() != x.numel() {
                return Err(TensorError::Invalid {
                    op: "reshape",
                    msg: format!("cannot reshape {:?} to {:?}", x.shape, shape),
                });
            }
            Ok(Tensor::new(shape.clone(), x.data.clone()))
        }
        OpKind::Transpose => {
            let x = inputs[0];
            if x.rank() != 2 {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("rank-{} tensor", x.rank()),
                });
            }
            let (r, c) = (x.shape[0], x.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data[i * c + j];
                }
            }
            Ok(Tensor::new(vec![c, r], out))
        }
        OpKind::Softmax(axis) => {
            let x = inputs[0];
            let (n, len, stride, lane_stride) = lanes(x, *axis, "softmax")?;
            let mut out = x.data.clone();
            for lane in 0..n {
                let base = lane * lane_stride;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(x.data[base + k * stride]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x.data[base + k * stride] - m).exp();
                    out[base + k * stride] = e;
                    z += e;
                }
                for k in 0..len {
                    out[base + k * stride] /= z;
                }
            }
            Ok(Tensor::new(x.shape.clone(), out))
        }
        OpKind::LayerNorm { eps } => {
            let x = inputs[0];
            let (n, len, stride, lane_stride) = lanes(x, x.rank() - 1, "layer_norm")?;
            let mut out = x.data.clone();
            for lane in 0..n {
                let base = lane * lane_stride;
                let mut mean = 0.0;
                for k in 0..len {
                    mean += x.data[base + k * stride];
                }
                mean /= len as f64;
                let mut var = 0.0;
                for k in 0..len {
                    let d = x.data[base + k * stride] - mean;
                    var += d * d;
                }
                var /= len as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for k in 0..len {
                    out[base + k * stride] = (x.data[base + k * stride] - mean) * inv;
                }
            }
            Ok(Tensor::new(x.shape.clone(), out))
        }
        OpKind::Gelu => Ok(map1(inputs[0], gelu)),
        OpKind::Tanh => Ok(map1(inputs[0], f64::tanh)),
        OpKind::Exp => Ok(map1(inputs[0], f64::exp)),
        OpKind::Log => Ok(map1(inputs[0], f64::ln)),
        OpKind::Softplus => Ok(map1(inputs[0], softplus)),
        OpKind::Sum(None) => Ok(Tensor::scalar(inputs[0].data.iter().sum())),
        OpKind::Mean(None) => {
            let x = inputs[0];
            Ok(Tensor::scalar(
                x.data.iter().sum::<f64>() / x.numel() as f64,
            ))
        }
        OpKind::Sum(Some(axis)) | OpKind::Mean(Some(axis)) => {
            let x = inputs[0];
            if x.rank() != 2 || *axis > 1 {
                return Err(TensorError::Invalid {
                    op: kind.name(),
                    msg: format!("axis {} reduction invalid for shape {:?}", axis, x.shape),
                });
            }
            let (r, c) = (x.shape[0], x.shape[1]);
            let (out_len, red_len) = if *axis == 0 { (c, r) } else { (r, c) };
            let mut out = vec![0.0; out_len];
            for i in 0..r {
                for j in 0..c {
                    let o = if *axis == 0 { j } else { i };
                    out[o] += x.data[i * c + j];
                }
            }
            if matches!(kind, OpKind::Mean(_)) {
                for v in &mut out {
                    *v /= red_len as f64;
                }
            }
            Ok(Tensor::new(vec![out_len], out))
        }
        OpKind::EmbeddingLookup(indices) => {
            let table = inputs[0];
            if table.rank() != 2 {
                return Err(TensorError::Invalid {
                    op: "embedding_lookup",
                    msg: format!("table must be rank 2, got {:?}", table.shape),
                });
            }
            let (v, d) = (table.shape[0], table.shape[1]);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &idx in indices.iter() {
                if idx >= v {
                    return Err(TensorError::Invalid {
                        op: "embedding_lookup",
                        msg: format!("index {idx} out of range for table with {v} rows"),
                    });
                }
                out.extend_from_slice(&table.data[idx * d..(idx + 1) * d]);
            }
            Ok(Tensor::new(vec![indices.len(), d], out))
        }
        OpKind::Dropout { p, mask } => {
            let x = inputs[0];
            if !(0.0..1.0).contains(p) {
                return Err(TensorError::Invalid {
                    op: "dropout",
                    msg: format!("p = {p} outside [0, 1)"),
                });
            }
            if mask.len() != x.numel() {
                return Err(TensorError::Invalid {
                    op: "dropout",
                    msg: format!("mask length {} != {} elements", mask.len(), x.numel()),
                });
            }
            let keep = 1.0 / (1.0 - p);
            Ok(Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .zip(mask.iter())
                    .map(|(v, m)| if *m { v * keep } else { 0.0 })
                    .collect(),
            ))
        }
        OpKind::MaskedFill { mask, value } => {
            let x = inputs[0];
            if mask.len() != x.numel() {
                return Err(TensorError::Invalid {
                    op: "masked_fill",
                    msg: format!("mask length {} != {} elements", mask.len(), x.numel()),
                });
            }
            Ok(Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .zip(mask.iter())
                    .map(|(v, m)| if *m { *value } else { *v })
                    .collect(),
            ))
        }
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn concat(axis: usize, inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs[0];
    match (first.rank(), axis) {
        (1, 0) => {
            let mut data = Vec::new();
            for t in inputs {
                if t.rank() != 1 {
                    return Err(shape_err("concat", first, t));
                }
                data.extend_from_slice(&t.data);
            }
            let n = data.len();
            Ok(Tensor::new(vec![n], data))
        }
        (2, 0) => {
            let c = first.shape[1];
            let mut data = Vec::new();
            let mut r = 0;
            for t in inputs {
                if t.rank() != 2 || t.shape[1] != c {
                    return Err(shape_err("concat", first, t));
                }
                data.extend_from_slice(&t.data);
                r += t.shape[0];
            }
            Ok(Tensor::new(vec![r, c], data))
        }
        (2, 1) => {
            let r = first.shape[0];
            let total_c: usize = inputs.iter().map(|t| t.shape[1]).sum();
            for t in inputs {
                if t.rank() != 2 || t.shape[0] != r {
                    return Err(shape_err("concat", first, t));
                }
            }
            let mut data = Vec::with_capacity(r * total_c);
            for i in 0..r {
                for t in inputs {
                    let c = t.shape[1];
                    data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
                }
            }
            Ok(Tensor::new(vec![r, total_c], data))
        }
        _ => Err(TensorError::Invalid {
            op: "concat",
            msg: format!("axis {} invalid for shape {:?}", axis, first.shape),
        }),
    }
}

fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let bad = |msg: String| TensorError::Invalid { op: "slice", msg };
    match (x.rank(), axis) {
        (1, 0) => {
            if start + len > x.shape[0] {
                return Err(bad(format!(
                    "range {start}..{} out of bounds for {:?}",
                    start + len,
                    x.shape
                )));
            }
            Ok(Tensor::new(vec![len], x.data[start..start + len].to_vec()))
        }
        (2, 0) => {
            let (r, c) = (x.shape[0], x.shape[1]);
            if start + len > r {
                return Err(bad(format!(
                    "row range {start}..{} out of bounds for {:?}",
                    start + len,
                    x.shape
                )));
            }
            Ok(Tensor::new(
                vec![len, c],
                x.data[start * c..(start + len) * c].to_vec(),
            ))
        }
        (2, 1) => {
            let (r, c) = (x.shape[0], x.shape[1]);
            if start + len > c {
                return Err(bad(format!(
                    "col range {start}..{} out of bounds for {:?}",
                    start + len,
                    x.shape
                )));
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
            }
            Ok(Tensor::new(vec![r, len], out))
        }
        _ => Err(bad(format!("axis {} invalid for shape {:?}", axis, x.shape))),
    }
}

// ── backward kernels ─────────────────────────────────────────────────

fn reduce_to(g: &Tensor, target_shape: &[usize]) -> Tensor {
    if g.shape == target_shape {
        return g.clone();
    }
    // g is [r, c], target is [c]: sum over rows
    let c = target_shape[0];
    let mut out = vec![0.0; c];
    for (i, v) in g.data.iter().enumerate() {
        out[i % c] += v;
    }
    Tensor::new(target_shape.to_vec(), out)
}

fn expand_to(x: &Tensor, target: &Tensor) -> Tensor {
    if x.shape == target.shape {
        return x.clone();
    }
    let c = x.shape[0];
    let mut out = Vec::with_capacity(target.numel());
    for i in 0..target.numel() {
        out.push(x.data[i % c]);
    }
    Tensor::new(target.shape.clone(), out)
}

fn eval_backward(
    kind: &OpKind,
    g: &Tensor,
    inputs: &[Arc<Tensor>],
    output: &Tensor,
) -> Vec<Option<Tensor>> {
    match kind {
        OpKind::Matmul => {
            let (a, b) = (&*inputs[0], &*inputs[1]);
            let bt = eval_forward(&OpKind::Transpose, &[b]).unwrap();
            let at = eval_forward(&OpKind::Transpose, &[a]).unwrap();
            vec![Some(matmul(g, &bt)), Some(matmul(&at, g))]
        }
        OpKind::Add => {
            let (a, b) = (&*inputs[0], &*inputs[1]);
            vec![
                Some(reduce_to(g, &a.shape)),
                Some(reduce_to(g, &b.shape)),
            ]
        }
        OpKind::Sub => {
            let (a, b) = (&*inputs[0], &*inputs[1]);
            let neg = map1(g, |v| -v);
            vec![Some(reduce_to(g, &a.shape)), Some(reduce_to(&neg, &b.shape))]
        }
        OpKind::Mul => {
            let (a, b) = (&*inputs[0], &*inputs[1]);
            let big = if a.numel() >= b.numel() { a } else { b };
            let ae = expand_to(a, big);
            let be = expand_to(b, big);
            let ga_full = Tensor::new(
                big.shape.clone(),
                g.data.iter().zip(&be.data).map(|(x, y)| x * y).collect(),
            );
            let gb_full = Tensor::new(
                big.shape.clone(),
                g.data.iter().zip(&ae.data).map(|(x, y)| x * y).collect(),
            );
            vec![
                Some(reduce_to(&ga_full, &a.shape)),
                Some(reduce_to(&gb_full, &b.shape)),
            ]
        }
        OpKind::Scale(c) => vec![Some(map1(g, |v| c * v))],
        OpKind::Concat(axis) => {
            let mut out = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for t in inputs {
                let len = match (t.rank(), axis) {
                    (1, 0) => t.shape[0],
                    (2, 0) => t.shape[0],
                    (2, 1) => t.shape[1],
                    _ => unreachable!(),
                };
                out.push(Some(slice(g, *axis, offset, len).unwrap()));
                offset += len;
            }
            out
        }
        OpKind::Slice { axis, start, len } => {
            let x = &*inputs[0];
            let mut gx = Tensor::zeros(&x.shape);
            match (x.rank(), axis) {
                (1, 0) => {
                    gx.data[*start..start + len].copy_from_slice(&g.data);
                }
                (2, 0) => {
                    let c = x.shape[1];
                    gx.data[start * c..(start + len) * c].copy_from_slice(&g.data);
                }
                (2, 1) => {
                    let c = x.shape[1];
                    for i in 0..x.shape[0] {
                        gx.data[i * c + start..i * c + start + len]
                            .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                }
                _ => unreachable!(),
            }
            vec![Some(gx)]
        }
        OpKind::Reshape(_) => {
            let x = &*inputs[0];
            vec![Some(Tensor::new(x.shape.clone(), g.data.clone()))]
        }
        OpKind::Transpose => {
            vec![Some(eval_forward(&OpKind::Transpose, &[g]).unwrap())]
        }
        OpKind::Softmax(axis) => {
            let y = output;
            let (n, len, stride, lane_stride) = lanes(y, *axis, "softmax").unwrap();
            let mut gx = vec![0.0; y.numel()];
            for lane in 0..n {
                let base = lane * lane_stride;
                let mut dot = 0.0;
                for k in 0..len {
                    let idx = base + k * stride;
                    dot += g.data[idx] * y.data[idx];
                }
                for k in 0..len {
                    let idx = base + k * stride;
                    gx[idx] = (g.data[idx] - dot) * y.data[idx];
                }
            }
            vec![Some(Tensor::new(y.shape.clone(), gx))]
        }
        OpKind::LayerNorm { eps } => {
            let x = &*inputs[0];
            let (n, len, stride, lane_stride) = lanes(x, x.rank() - 1, "layer_norm").unwrap();
            let mut gx = vec![0.0; x.numel()];
            for lane in 0..n {
                let base = lane * lane_stride;
                let mut mean = 0.0;
                for k in 0..len {
                    mean += x.data[base + k * stride];
                }
                mean /= len as f64;
                let mut var = 0.0;
                for k in 0..len {
                    let d = x.data[base + k * stride] - mean;
                    var += d * d;
                }
                var /= len as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let mut g_mean = 0.0;
                let mut gy_mean = 0.0;
                for k in 0..len {
                    let idx = base + k * stride;
                    let ynorm = (x.data[idx] - mean) * inv;
                    g_mean += g.data[idx];
                    gy_mean += g.data[idx] * ynorm;
                }
                g_mean /= len as f64;
                gy_mean /= len as f64;
                for k in 0..len {
                    let idx = base + k * stride;
                    let ynorm = (x.data[idx] - mean) * inv;
                    gx[idx] = inv * (g.data[idx] - g_mean - ynorm * gy_mean);
                }
            }
            vec![Some(Tensor::new(x.shape.clone(), gx))]
        }
        OpKind::Gelu => {
            let x = &*inputs[0];
            vec![Some(Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, gv)| gv * gelu_prime(*v))
                    .collect(),
            ))]
        }
        OpKind::Tanh => {
            let y = output;
            vec![Some(Tensor::new(
                y.shape.clone(),
                y.data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, gv)| gv * (1.0 - v * v))
                    .collect(),
            ))]
        }
        OpKind::Exp => {
            let y = output;
            vec![Some(Tensor::new(
                y.shape.clone(),
                y.data.iter().zip(&g.data).map(|(v, gv)| gv * v).collect(),
            ))]
        }
        OpKind::Log => {
            let x = &*inputs[0];
            vec![Some(Tensor::new(
                x.shape.clone(),
                x.data.iter().zip(&g.data).map(|(v, gv)| gv / v).collect(),
            ))]
        }
        OpKind::Softplus => {
            let x = &*inputs[0];
            vec![Some(Tensor::new(
                x.shape.clone(),
                x.data
                    .iter()
                    .zip(&g.data)
                    .map(|(v, gv)| gv * sigmoid(*v))
                    .collect(),
            ))]
        }
        OpKind::Sum(None) => {
            let x = &*inputs[0];
            vec![Some(Tensor::new(
                x.shape.clone(),
                vec![g.data[0]; x.numel()],
            ))]
        }
        OpKind::Mean(None) => {
            let x = &*inputs[0];
            let v = g.data[0] / x.numel() as f64;
            vec![Some(Tensor::new(x.shape.clone(), vec![v; x.numel()]))]
        }
        OpKind::Sum(Some(axis)) | OpKind::Mean(Some(axis)) => {
            let x = &*inputs[0];
            let (r, c) = (x.shape[0], x.shape[1]);
            let red_len = if *axis == 0 { r } else { c };
            let denom = if matches!(kind, OpKind::Mean(_)) {
                red_len as f64
            } else {
                1.0
            };
            let mut gx = vec![0.0; x.numel()];
            for i in 0..r {
                for j in 0..c {
                    let o = if *axis == 0 { j } else { i };
                    gx[i * c + j] = g.data[o] / denom;
                }
            }
            vec![Some(Tensor::new(x.shape.clone(), gx))]
        }
        OpKind::EmbeddingLookup(indices) => {
            let table = &*inputs[0];
            let d = table.shape[1];
            let mut gt = Tensor::zeros(&table.shape);
            for (i, &idx) in indices.iter().enumerate() {
                for j in 0..d {
                    gt.data[idx * d + j] += g.data[i * d + j];
                }
            }
            vec![Some(gt)]
        }
        OpKind::Dropout { p, mask } => {
            let keep = 1.0 / (1.0 - p);
            vec![Some(Tensor::new(
                g.shape.clone(),
                g.data
                    .iter()
                    .zip(mask.iter())
                    .map(|(v, m)| if *m { v * keep } else { 0.0 })
                    .collect(),
            ))]
        }
        OpKind::MaskedFill { mask, .. } => {
            vec![Some(Tensor::new(
                g.shape.clone(),
                g.data
                    .iter()
                    .zip(mask.iter())
                    .map(|(v, m)| if *m { 0.0 } else { *v })
                    .collect(),
            ))]
        }
    }
}

// ── gradient checking ────────────────────────────────────────────────

/// Max relative error between analytic gradients and central differences.
///
/// `f` must build a scalar-valued computation from its input node. The
/// numeric side re-runs `f` on fresh tapes with perturbed copies of `x`,
/// so `f` has to be a pure function of the tape and input node.
pub fn grad_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps = {eps} outside (0, 1e-3]"),
        });
    }
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xid)?;
    if !tape.value(y).is_scalar() {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("f returned shape {:?}, expected scalar", tape.value(y).shape),
        });
    }
    let mut grads = tape.backward(y)?;
    let analytic = grads.take(xid).unwrap_or_else(|| Tensor::zeros(&x.shape));

    let mut eval = |xp: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(xp, false);
        let y = f(&mut t, id)?;
        Ok(t.value(y).data[0])
    };

    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut hi = x.clone();
        hi.data[i] += eps;
        let mut lo = x.clone();
        lo.data[i] -= eps;
        let numeric = (eval(hi)? - eval(lo)?) / (2.0 * eps);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
        let v = tape.leaf(Tensor::from_rows(&[vec![7.0], vec![2.0]]), false);
        let out = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(out).data, vec![7.0, 2.0]);
        assert_eq!(tape.value(out).shape, vec![2, 1]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0, 0.0]), false);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.3, -1.2, 2.5, 0.0]), false);
        let y = tape.softmax(x, 0).unwrap();
        let shifted = tape.leaf(t1(&[0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0, 7.0]), false);
        let ys = tape.softmax(shifted, 0).unwrap();
        let sum: f64 = tape.value(y).data.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in tape.value(y).data.iter().zip(&tape.value(ys).data.clone()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0]), false);
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).data[0], 0.0);
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 4.0], vec![10.0, 3.0, -7.0, 0.1]]),
            false,
        );
        let y = tape.layer_norm(x, 1e-5).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let row = &v.data[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly below 1
        }
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn backward_matmul_column_sums() {
        // loss = sum(W h), grad(h) = column sums of W = [4, 6]
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), false);
        let h = tape.leaf(Tensor::from_rows(&[vec![1.0], vec![1.0]]), true);
        let wh = tape.matmul(w, h).unwrap();
        let loss = tape.sum_all(wh).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(h).unwrap().data, vec![4.0, 6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0]), true);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::BackwardTwice)
        ));
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_loss_errors() {
        let mut tape = Tape::new();
        let _ = tape.leaf(t1(&[1.0]), true);
        assert!(matches!(tape.backward(99), Err(TensorError::Detached(99))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), false);
        let b = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), false);
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn concat_slice_roundtrip_bit_exact() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.5, -2.25], vec![0.125, 7.0]]), false);
        let b = tape.leaf(Tensor::from_rows(&[vec![3.5, 0.0625]]), false);
        let cat = tape.concat(0, &[a, b]).unwrap();
        let back_a = tape.slice(cat, 0, 0, 2).unwrap();
        let back_b = tape.slice(cat, 0, 2, 1).unwrap();
        assert_eq!(tape.value(back_a).data, tape.value(a).data);
        assert_eq!(tape.value(back_b).data, tape.value(b).data);
    }

    #[test]
    fn grad_check_tanh_sum() {
        let x = t1(&[0.3, -1.1, 0.7, 2.0]);
        let err = grad_check(
            |t, x| {
                let y = t.tanh(x)?;
                t.sum_all(y)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let x = t1(&[0.4, 1.2]);
        let err = grad_check(
            |t, _x| {
                let c = t.leaf(Tensor::scalar(5.0), false);
                t.sum_all(c)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_layer_norm_constant_row_finite() {
        let x = t1(&[0.5, 0.5, 0.5, 0.5]);
        let err = grad_check(
            |t, x| {
                let w = t.leaf(Tensor::new(vec![4], vec![1.0, -0.5, 2.0, 0.25]), false);
                let y = t.layer_norm(x, 1e-5)?;
                let wy = t.mul(y, w)?;
                t.sum_all(wy)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err.is_finite());
        assert!(err < 1e-5, "err = {err}");
    }
}
