//! Dense row-major tensors that record the operations producing them.
//!
//! A [`Tensor`] is an immutable, cheaply clonable handle. Operations that
//! touch at least one input with `requires_grad` keep a reference to their
//! inputs so that [`Tensor::backward`](super::backward) can walk the graph in
//! reverse. Inputs that do not require gradients produce plain leaves and
//! build no graph at all.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// How a node was produced. Parents are held by value so the graph stays
/// alive for as long as the output does.
#[derive(Debug)]
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    Scale(Tensor, f64),
    Neg(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Tanh(Tensor),
    Gelu(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    Huber(Tensor, f64),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Sum(Tensor, Option<usize>),
    Mean(Tensor, Option<usize>),
    Reshape(Tensor),
    Narrow { input: Tensor, axis: usize, start: usize },
    GatherRows { input: Tensor, rows: Vec<usize> },
    Concat { inputs: Vec<Tensor>, axis: usize },
    AddRow(Tensor, Tensor),
    MulRow(Tensor, Tensor),
    Softmax { input: Tensor, scale: f64, clipped: Vec<bool> },
    LayerNorm { input: Tensor, eps: f64 },
    RowCosine(Tensor, Tensor),
    TemporalDft { input: Tensor, blocks: usize },
    CrossEntropy { logits: Tensor, labels: Vec<usize> },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddRow(a, b)
            | MulRow(a, b) | RowCosine(a, b) => vec![a, b],
            AddScalar(a) | Scale(a, _) | Neg(a) | Abs(a) | Relu(a) | Exp(a) | Tanh(a)
            | Gelu(a) | Square(a) | Sqrt(a) | Huber(a, _) | Transpose(a) | Sum(a, _)
            | Mean(a, _) | Reshape(a) => vec![a],
            Narrow { input, .. }
            | GatherRows { input, .. }
            | Softmax { input, .. }
            | LayerNorm { input, .. }
            | TemporalDft { input, .. } => vec![input],
            Concat { inputs, .. } => inputs.iter().collect(),
            CrossEntropy { logits, .. } => vec![logits],
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            AddScalar(..) => "add_scalar",
            Scale(..) => "scale",
            Neg(..) => "neg",
            Abs(..) => "abs",
            Relu(..) => "relu",
            Exp(..) => "exp",
            Tanh(..) => "tanh",
            Gelu(..) => "gelu",
            Square(..) => "square",
            Sqrt(..) => "sqrt",
            Huber(..) => "huber",
            MatMul(..) => "matmul",
            Transpose(..) => "transpose",
            Sum(..) => "sum",
            Mean(..) => "mean",
            Reshape(..) => "reshape",
            Narrow { .. } => "narrow",
            GatherRows { .. } => "gather_rows",
            Concat { .. } => "concat",
            AddRow(..) => "add_row",
            MulRow(..) => "mul_row",
            Softmax { .. } => "softmax",
            LayerNorm { .. } => "layer_norm",
            RowCosine(..) => "row_cosine",
            TemporalDft { .. } => "temporal_dft",
            CrossEntropy { .. } => "cross_entropy",
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<Op>,
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .finish()
    }
}

impl Tensor {
    /// Builds a leaf tensor. Fails when `data` does not fill `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op: None,
        }))
    }

    /// Wraps the result of a forward computation, recording `op` only when
    /// some input needs a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Self> {
        debug_assert_eq!(data.len(), numel(&shape));
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Ok(Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op: requires_grad.then_some(op),
        })))
    }

    pub fn scalar(value: f64) -> Self {
        Self::leaf(Vec::new(), vec![value], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::leaf(shape.to_vec(), vec![value; numel(shape)], false)
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::leaf(vec![n], data, false)
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Ragged);
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    /// Same values, now a trainable leaf.
    pub fn requires_grad_(self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), true)
    }

    /// Value-identical leaf that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.0.shape.clone(), self.0.data.clone(), false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.shape.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    pub(crate) fn op(&self) -> Option<&Op> {
        self.0.op.as_ref()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::Rank {
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape().last().copied().unwrap_or(1)
    }
}
