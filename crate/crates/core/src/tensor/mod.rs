//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Operations are recorded on a [`Tape`]; `backward` replays them in reverse
//! to accumulate gradients via the chain rule. Element storage is generic
//! (`f32` for training, `f64` for verification) but every inner reduction —
//! convolution sums, dot products, loss reductions, gradient accumulation —
//! runs in 64-bit with a fixed order, so results are bit-identical across
//! thread counts.

mod adam;
mod ops;

pub use adam::AdamState;

use crate::error::{GhostError, Result};
use std::sync::Arc;

/// Element type of a tape. All arithmetic goes through f64; `Scalar` only
/// controls how values are stored between operations.
pub trait Scalar: Copy + Send + Sync + PartialOrd + std::fmt::Debug + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// mul * x + add, elementwise with scalar constants (the offset does
    /// not enter the backward rule).
    Affine {
        input: NodeId,
        mul: f64,
    },
    Relu(NodeId),
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Sin(NodeId),
    Cos(NodeId),
    /// out = weight · input + bias; input is [n] or [batch, n].
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// out = matrix · input for a constant (non-differentiated) matrix.
    MatMulConst {
        input: NodeId,
        matrix: Arc<Vec<f64>>,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: usize,
    },
    MaxPool2x2 {
        input: NodeId,
        /// Flat plane index of the winning input element per output element.
        argmax: Vec<u32>,
    },
    UpsampleNearest2x(NodeId),
    /// Keep the top-left [.., h, w] region.
    Crop2d {
        input: NodeId,
        h: usize,
        w: usize,
    },
    ConcatChannels(NodeId, NodeId),
    Reshape(NodeId),
    MseLoss(NodeId, NodeId),
    /// sum((x - target)^2) against a constant target.
    SumSqDiffConst {
        input: NodeId,
        target: Arc<Vec<f64>>,
    },
    /// Smoothed isotropic total variation: sum sqrt(dx^2 + dy^2 + eps^2).
    TvLoss {
        input: NodeId,
        eps: f64,
    },
    #[allow(dead_code)]
    Phantom(std::marker::PhantomData<T>),
}

pub(crate) struct Node<T: Scalar> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub op: Op<T>,
    /// True if this node is a grad-requiring leaf or depends on one.
    pub needs_grad: bool,
}

/// Recorded computation; single-owner, not shared across training runs.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`], stored in f64.
pub struct Gradients {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    pub fn values_f64(&self, id: NodeId) -> Vec<f64> {
        self.nodes[id.0].values.iter().map(|v| v.to_f64()).collect()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0].to_f64()
    }

    pub fn all_finite(&self, id: NodeId) -> bool {
        self.nodes[id.0].values.iter().all(|v| v.to_f64().is_finite())
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let needs_grad = match &op {
            Op::Leaf => false, // set by leaf()
            other => self.op_inputs(other).iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Leaf | Op::Phantom(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => {
                vec![*a, *b]
            }
            Op::MseLoss(a, b) => vec![*a, *b],
            Op::Affine { input, .. }
            | Op::Relu(input)
            | Op::LeakyRelu { input, .. }
            | Op::Sin(input)
            | Op::Cos(input)
            | Op::MatMulConst { input, .. }
            | Op::MaxPool2x2 { input, .. }
            | Op::UpsampleNearest2x(input)
            | Op::Crop2d { input, .. }
            | Op::Reshape(input)
            | Op::SumSqDiffConst { input, .. }
            | Op::TvLoss { input, .. } => vec![*input],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
        }
    }

    /// Record an input tensor. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "leaf shape/value length mismatch"
        );
        let id = self.push(shape.to_vec(), values, Op::Leaf);
        self.nodes[id.0].needs_grad = requires_grad;
        id
    }

    pub fn leaf_from_f64(&mut self, shape: &[usize], values: &[f64], requires_grad: bool) -> NodeId {
        let converted = values.iter().map(|&v| T::from_f64(v)).collect();
        self.leaf(shape, converted, requires_grad)
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            for (axis, (x, y)) in sa.iter().zip(sb.iter()).enumerate() {
                if x != y {
                    return Err(GhostError::ShapeMismatch {
                        op,
                        axis: axis_name(axis),
                        expected: *x,
                        got: *y,
                    });
                }
            }
            return Err(GhostError::ShapeMismatch {
                op,
                axis: "rank",
                expected: sa.len(),
                got: sb.len(),
            });
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("add", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x + y);
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("sub", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x - y);
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape("mul", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x * y);
        Ok(self.push(self.nodes[a.0].shape.clone(), values, Op::Mul(a, b)))
    }

    /// mul * x + add with scalar constants.
    pub fn affine(&mut self, input: NodeId, mul: f64, add: f64) -> NodeId {
        let values = map_values(&self.nodes[input.0].values, |x| mul * x + add);
        self.push(
            self.nodes[input.0].shape.clone(),
            values,
            Op::Affine { input, mul },
        )
    }

    pub fn scale(&mut self, input: NodeId, mul: f64) -> NodeId {
        self.affine(input, mul, 0.0)
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let values = map_values(&self.nodes[input.0].values, |x| if x > 0.0 { x } else { 0.0 });
        self.push(self.nodes[input.0].shape.clone(), values, Op::Relu(input))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let values = map_values(&self.nodes[input.0].values, |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        });
        self.push(
            self.nodes[input.0].shape.clone(),
            values,
            Op::LeakyRelu { input, slope },
        )
    }

    pub fn sin(&mut self, input: NodeId) -> NodeId {
        let values = map_values(&self.nodes[input.0].values, f64::sin);
        self.push(self.nodes[input.0].shape.clone(), values, Op::Sin(input))
    }

    pub fn cos(&mut self, input: NodeId) -> NodeId {
        let values = map_values(&self.nodes[input.0].values, f64::cos);
        self.push(self.nodes[input.0].shape.clone(), values, Op::Cos(input))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let len = self.nodes[input.0].values.len();
        if shape.iter().product::<usize>() != len {
            return Err(GhostError::ShapeMismatch {
                op: "reshape",
                axis: "elements",
                expected: len,
                got: shape.iter().product(),
            });
        }
        let values = self.nodes[input.0].values.clone();
        Ok(self.push(shape.to_vec(), values, Op::Reshape(input)))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar root; visits each node at most once.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root.0].values.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Take the output gradient out to appease the borrow checker;
            // ops never write to their own output slot.
            let gout = grads[id].take().unwrap();
            self.backward_op(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    pub(crate) fn ensure_grad<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> &'a mut Vec<f64> {
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; self.nodes[id.0].values.len()]);
        }
        grads[id.0].as_mut().unwrap()
    }

    pub(crate) fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }
}

fn axis_name(axis: usize) -> &'static str {
    match axis {
        0 => "0",
        1 => "1",
        2 => "2",
        3 => "3",
        _ => "4+",
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(f64, f64) -> f64) -> Vec<T> {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| T::from_f64(f(x.to_f64(), y.to_f64())))
        .collect()
}

fn map_values<T: Scalar>(a: &[T], f: impl Fn(f64) -> f64) -> Vec<T> {
    a.iter().map(|&x| T::from_f64(f(x.to_f64()))).collect()
}
