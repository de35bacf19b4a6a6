//! Dense f64 tensor operations with tape-based reverse-mode differentiation.
//!
//! All values live on a [`Tape`]: an append-only arena of nodes, each holding
//! row-major data, a shape, and the operation that produced it. Node ids are
//! topologically ordered by construction, so the backward pass is a single
//! reverse sweep. Everything is 64-bit; gradient checks to 1e-4 are not
//! reliable at single precision.
//!
//! Gradient semantics: [`Tape::backward`] propagates through a fresh flow
//! buffer and then adds the result into each node's persistent gradient, so
//! calling it twice without [`Tape::zero_grad`] doubles the stored gradients.

mod conv;
mod elementwise;
mod linalg;
mod special;

pub mod gradcheck;

pub use special::{upper_triangle_index, upper_triangle_len};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    SafeDiv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Sqrt,
    Abs,
}

pub(crate) enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    AvgPool2d { x: TensorId, kernel: usize, stride: usize },
    MaxPool2d { x: TensorId, argmax: Vec<usize> },
    AdaptiveAvgPool2d { x: TensorId },
    UpsampleBilinear { x: TensorId },
    Binary { kind: BinaryKind, a: TensorId, b: TensorId },
    Unary { kind: UnaryKind, x: TensorId },
    AddScalar { x: TensorId },
    Scale { x: TensorId, c: f64 },
    Sum { x: TensorId },
    SpatialMean { x: TensorId },
    MatMul2d { a: TensorId, b: TensorId },
    Transpose2d { x: TensorId },
    SumAxis0 { x: TensorId },
    Reshape { x: TensorId },
    ConcatChannels { xs: Vec<TensorId> },
    ExtractPatch { x: TensorId, r0: usize, c0: usize },
    PixelCovUpper { x: TensorId },
    BceWithLogitsMean { x: TensorId, targets: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation: nodes in topological order (inputs precede uses).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    datas: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
}

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

    /// Insert an input node. `requires_grad` marks it for gradient
    /// accumulation during [`Tape::backward`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, op, requires_grad });
        self.datas.push(data);
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.datas[id.0]
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.datas[id.0].len()
    }

    /// Extract the value of a scalar (single-element) node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.datas[id.0][0]
    }

    /// Accumulated gradient of a node, if any has been computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Clear all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn shape4(&self, id: TensorId) -> Result<[usize; 4]> {
        let s = self.shape(id);
        if s.len() != 4 {
            return Err(Error::shape(format!("expected 4-d tensor, got shape {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
    /// persistent per-node buffers; see the module docs for the semantics.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        flow[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = flow[i].take() else { continue };
            self.backward_op(i, &g, &mut flow);
            // fold this node's flow into its persistent gradient
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        *a += gi;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, g: &[f64], flow: &mut [Option<Vec<f64>>]) {
        // flow[p] lazily allocated; only parents that require grad receive flow
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                conv::conv2d_backward(self, i, g, flow, *x, *w, *b, *stride, *pad)
            }
            Op::AvgPool2d { x, kernel, stride } => {
                conv::avg_pool_backward(self, i, g, flow, *x, *kernel, *stride)
            }
            Op::MaxPool2d { x, argmax } => conv::max_pool_backward(self, g, flow, *x, argmax),
            Op::AdaptiveAvgPool2d { x } => conv::adaptive_avg_pool_backward(self, i, g, flow, *x),
            Op::UpsampleBilinear { x } => conv::upsample_backward(self, i, g, flow, *x),
            Op::Binary { kind, a, b } => elementwise::binary_backward(self, i, g, flow, *kind, *a, *b),
            Op::Unary { kind, x } => elementwise::unary_backward(self, i, g, flow, *kind, *x),
            Op::AddScalar { x } => elementwise::pass_through_backward(self, g, flow, *x),
            Op::Scale { x, c } => elementwise::scale_backward(self, g, flow, *x, *c),
            Op::Sum { x } => linalg::sum_backward(self, g, flow, *x),
            Op::SpatialMean { x } => linalg::spatial_mean_backward(self, g, flow, *x),
            Op::MatMul2d { a, b } => linalg::matmul_backward(self, g, flow, *a, *b),
            Op::Transpose2d { x } => linalg::transpose_backward(self, g, flow, *x),
            Op::SumAxis0 { x } => linalg::sum_axis0_backward(self, g, flow, *x),
            Op::Reshape { x } => elementwise::pass_through_backward(self, g, flow, *x),
            Op::ConcatChannels { xs } => linalg::concat_backward(self, g, flow, xs),
            Op::ExtractPatch { x, r0, c0 } => linalg::extract_patch_backward(self, i, g, flow, *x, *r0, *c0),
            Op::PixelCovUpper { x } => special::pixel_cov_backward(self, g, flow, *x),
            Op::BceWithLogitsMean { x, targets } => special::bce_backward(self, g, flow, *x, targets),
        }
    }

    /// Fetch (allocating if needed) the flow buffer of a parent node.
    pub(crate) fn flow_buf<'f>(&self, flow: &'f mut [Option<Vec<f64>>], p: TensorId) -> &'f mut [f64] {
        flow[p.0].get_or_insert_with(|| vec![0.0; self.datas[p.0].len()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_mismatch_rejected() {
        let mut t = Tape::new();
        assert!(t.leaf(vec![1.0, 2.0], &[3], true).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn linear_map_gradient() {
        // loss = sum(w * x) => dL/dw = x
        let mut t = Tape::new();
        let w = t.leaf(vec![1.0, -2.0, 0.5], &[3], true).unwrap();
        let x = t.constant(vec![3.0, 4.0, 5.0], &[3]).unwrap();
        let wx = t.mul(w, x).unwrap();
        let loss = t.sum(wx).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn square_gradient() {
        // loss = sum(x^2) => dL/dx = 2x
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, -3.0, 2.5], &[3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -6.0, 5.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0], &[1], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        t.zero_grad();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn grad_skips_untracked() {
        let mut t = Tape::new();
        let x = t.constant(vec![2.0], &[1]).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss).unwrap();
        assert!(t.grad(x).is_none());
    }
}
