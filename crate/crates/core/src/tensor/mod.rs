//! Reverse-mode automatic differentiation over shaped `f64` buffers.
//!
//! A [`Tape`] records every operation eagerly during the forward pass; calling
//! [`Tape::backward`] on a scalar replays the log in reverse and accumulates
//! gradients additively into every reachable node. The record is meant to be
//! built, differentiated once, and dropped; there is no persistent graph.

mod nn;
mod ops;

pub mod check;

pub use nn::{mlp, multi_head_attention, AttentionParams};

use std::fmt;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    Shape { op: &'static str, detail: String },
    /// Axis index out of range for the operand rank.
    Axis { op: &'static str, axis: usize, rank: usize },
    /// The reduced axis has zero extent, so the result is undefined.
    EmptyAxis { op: &'static str },
    /// Channel count is not divisible by the head count.
    HeadSplit { channels: usize, heads: usize },
    /// `backward` requires a scalar loss.
    NotScalar { len: usize },
    /// The loss tensor does not live on this tape.
    Untracked,
    /// A function evaluated to NaN or infinity where a finite value is required.
    NonFinite { context: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            TensorError::Axis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::EmptyAxis { op } => write!(f, "{op}: reduced axis is empty"),
            TensorError::HeadSplit { channels, heads } => {
                write!(f, "channels {channels} not divisible by heads {heads}")
            }
            TensorError::NotScalar { len } => {
                write!(f, "backward requires a scalar loss, got {len} elements")
            }
            TensorError::Untracked => write!(f, "tensor is not tracked on this tape"),
            TensorError::NonFinite { context } => write!(f, "{context}: non-finite value"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Shaped row-major `f64` array, optionally tracked on a tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<usize>,
}

impl Tensor {
    /// Untracked constant. `data.len()` must equal the shape product.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(TensorError::Shape {
                op: "constant",
                detail: format!("{} values for shape {:?}", data.len(), shape),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data, node: None })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], node: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "value() on non-scalar");
        self.data[0]
    }

    pub fn node(&self) -> Option<usize> {
        self.node
    }

    /// Rows × columns view of a rank-2 tensor.
    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Shape {
                op,
                detail: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

type Rule = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    rule: Option<Rule>,
}

/// Per-node gradient buffers populated during the reverse sweep.
pub struct GradSink {
    slots: Vec<Option<Vec<f64>>>,
}

impl GradSink {
    /// Gradient buffer for `node`, created zero-filled on first touch.
    fn buf(&mut self, node: usize, size: usize) -> &mut [f64] {
        self.slots[node].get_or_insert_with(|| vec![0.0; size])
    }
}

/// Gradients of a scalar loss with respect to every reachable tape node.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` was reached by the sweep.
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        self.slots.get(t.node?).and_then(|s| s.as_deref())
    }

    /// Like [`Gradients::of`] but returns zeros for unreachable tensors.
    pub fn of_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        match self.of(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

/// Smallest distances observed to the kinks of piecewise operations.
///
/// Finite-difference checks are only trustworthy when every nonsmooth spot
/// (ReLU zero crossings, max-pool ties, |x| at zero, clamp edges) is farther
/// from the evaluation point than the probe step. Forward passes track these
/// margins so check harnesses can reject and resample degenerate inputs.
#[derive(Debug, Clone, Copy)]
pub struct KinkMargins {
    pub relu: f64,
    pub pool_gap: f64,
    pub abs: f64,
    pub clamp: f64,
}

impl KinkMargins {
    fn fresh() -> Self {
        KinkMargins { relu: f64::INFINITY, pool_gap: f64::INFINITY, abs: f64::INFINITY, clamp: f64::INFINITY }
    }

    pub fn min(&self) -> f64 {
        self.relu.min(self.pool_gap).min(self.abs).min(self.clamp)
    }
}

/// Operation log for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    margins: KinkMargins,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), margins: KinkMargins::fresh() }
    }

    pub fn margins(&self) -> KinkMargins {
        self.margins
    }

    /// Tracked leaf; its gradient is retained by [`Tape::backward`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let mut t = Tensor::constant(data, shape)?;
        t.node = Some(self.push(None));
        Ok(t)
    }

    fn push(&mut self, rule: Option<Rule>) -> usize {
        self.nodes.push(Node { rule });
        self.nodes.len() - 1
    }

    /// Registers `out` as the result of an op; untracked when `rule` is None.
    fn record(&mut self, shape: Vec<usize>, data: Vec<f64>, rule: Option<Rule>) -> Tensor {
        let node = rule.map(|r| self.push(Some(r)));
        Tensor { shape, data, node }
    }

    /// Gradients of the scalar `loss` w.r.t. every tensor recorded before it.
    ///
    /// Nodes are replayed strictly in reverse creation order; contributions to
    /// a node consumed several times accumulate additively.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let lid = loss.node.ok_or(TensorError::Untracked)?;
        if loss.len() != 1 {
            return Err(TensorError::NotScalar { len: loss.len() });
        }
        let mut sink = GradSink { slots: vec![None; self.nodes.len()] };
        sink.buf(lid, 1)[0] = 1.0;
        for id in (0..=lid).rev() {
            let Some(grad) = sink.slots[id].clone() else { continue };
            if let Some(rule) = &self.nodes[id].rule {
                rule(&grad, &mut sink);
            }
        }
        Ok(Gradients { slots: sink.slots })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
