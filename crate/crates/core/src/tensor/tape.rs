//! Define-by-run computation tape.
//!
//! Every op appends its output tensor to an arena and records a backward
//! closure. Arena indices grow monotonically, so a node's inputs always
//! precede its output; backward replays nodes in exact reverse order and
//! accumulates gradients (the caller zeroes between steps).

use crate::error::{Error, Result};
use crate::tensor::numel;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(super) usize);

pub(super) struct Slot {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
}

/// Context handed to backward closures.
///
/// `slots` is the full value arena (values are immutable after forward);
/// `grads` covers only slots recorded *before* the node's output, which is
/// every slot a node may write to.
pub(super) struct BackwardArgs<'a> {
    pub slots: &'a [Slot],
    pub grad_out: &'a [f32],
    grads: &'a mut [Option<Vec<f32>>],
}

impl<'a> BackwardArgs<'a> {
    /// Value of any slot. The borrow is tied to the arena, not to `self`,
    /// so it can be held across `grad_mut` calls.
    pub fn value(&self, id: TensorId) -> &'a [f32] {
        &self.slots[id.0].data
    }

    #[allow(dead_code)]
    pub fn shape(&self, id: TensorId) -> &'a [usize] {
        &self.slots[id.0].shape
    }

    pub fn wants_grad(&self, id: TensorId) -> bool {
        self.slots[id.0].requires_grad
    }

    /// Gradient accumulator for an input slot, allocated lazily.
    pub fn grad_mut(&mut self, id: TensorId) -> &mut [f32] {
        debug_assert!(id.0 < self.grads.len(), "grad_mut called on a non-input slot");
        let n = self.slots[id.0].data.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }
}

type BackwardFn = Box<dyn Fn(&mut BackwardArgs)>;

struct Node {
    output: TensorId,
    backward: BackwardFn,
}

/// Recorded forward pass: tensor arena plus the op list.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    grads: Vec<Option<Vec<f32>>>,
    nodes: Vec<Node>,
    /// True for slots produced by an op (cleared at the start of every
    /// backward pass; leaf gradients accumulate across passes).
    is_node_output: Vec<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Records a leaf tensor (network input, bound parameter, constant).
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> TensorId {
        assert_eq!(numel(&shape), data.len(), "leaf data length does not match shape {shape:?}");
        self.push_slot(shape, data, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> TensorId {
        self.leaf(shape, data, false)
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        &self.slots[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(super) fn push_slot(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
    ) -> TensorId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value written to tape slot {}",
            self.slots.len()
        );
        self.slots.push(Slot { shape, data, requires_grad });
        self.grads.push(None);
        self.is_node_output.push(false);
        TensorId(self.slots.len() - 1)
    }

    /// Records an op node. All `inputs` must already live on this tape.
    pub(super) fn push_node(&mut self, inputs: &[TensorId], output: TensorId, backward: BackwardFn) {
        debug_assert!(inputs.iter().all(|i| i.0 < output.0), "tape inputs must precede the output");
        self.is_node_output[output.0] = true;
        self.nodes.push(Node { output, backward });
    }

    pub(super) fn any_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|i| self.slots[i.0].requires_grad)
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate into
    /// existing buffers, so calling this twice without [`Tape::zero_grads`]
    /// doubles them; intermediate gradients are rebuilt per pass.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.slots[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.slots[loss.0].shape
            )));
        }
        for (g, &derived) in self.grads.iter_mut().zip(&self.is_node_output) {
            if derived {
                *g = None;
            }
        }
        match &mut self.grads[loss.0] {
            Some(g) => g[0] += 1.0,
            slot => *slot = Some(vec![1.0]),
        }
        for node in self.nodes.iter().rev() {
            let out = node.output.0;
            let (earlier_grads, later_grads) = self.grads.split_at_mut(out);
            let grad_out = match &later_grads[0] {
                Some(g) => g.as_slice(),
                None => continue, // output not on any path to the loss
            };
            let mut args = BackwardArgs { slots: &self.slots, grad_out, grads: earlier_grads };
            (node.backward)(&mut args);
        }
        Ok(())
    }
}
