//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops are evaluated eagerly as they are recorded. The recorded graph can be
//! replayed with new leaf values through [`Tape::eval`], which is how the
//! finite-difference checks and fixed-graph training loops reuse a tape.
//! Backward visits nodes in reverse recording order exactly once.

use std::any::Any;

use crate::error::{OpError, Result, TensorError};
use crate::tensor::Tensor;

/// Opaque per-node state an op keeps from forward for its backward pass.
pub type Saved = Option<Box<dyn Any + Send + Sync>>;

/// Result of an op's forward evaluation.
pub struct Forward {
    pub value: Tensor,
    pub saved: Saved,
}

impl Forward {
    pub fn new(value: Tensor) -> Self {
        Self { value, saved: None }
    }

    pub fn with_saved<T: Any + Send + Sync>(value: Tensor, saved: T) -> Self {
        Self { value, saved: Some(Box::new(saved)) }
    }
}

/// Everything an op sees when propagating adjoints.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Adjoint of the output, same shape as `output`.
    pub grad: &'a Tensor,
    pub saved: Option<&'a (dyn Any + Send + Sync)>,
    /// Which inputs need a gradient. Ops may return `None` for the rest.
    pub needs: &'a [bool],
}

impl BackwardCtx<'_> {
    pub fn saved<T: Any>(&self) -> &T {
        self.saved
            .and_then(|s| s.downcast_ref::<T>())
            .expect("op saved state missing or of the wrong type")
    }
}

/// A differentiable primitive.
///
/// `backward` returns one entry per input: the vector-Jacobian product of the
/// output adjoint with respect to that input, or `None` when not needed.
pub trait Op: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Forward, OpError>;
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>>;
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Kind {
    Leaf,
    Op(Box<dyn Op>),
}

struct Node {
    kind: Kind,
    inputs: Vec<usize>,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stale: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            kind: Kind::Leaf,
            inputs: Vec::new(),
            value,
            saved: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].kind, Kind::Leaf)
    }

    /// Trainable leaves in recording order.
    pub fn params(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .map(Var)
            .filter(|&v| self.is_leaf(v) && self.requires_grad(v))
            .collect()
    }

    /// Record `op` applied to `inputs`, evaluating it immediately.
    pub fn apply<O: Op + 'static>(&mut self, op: O, inputs: &[Var]) -> Result<Var> {
        if self.stale {
            return Err(TensorError::NotEvaluated);
        }
        let id = self.nodes.len();
        for v in inputs {
            if v.0 >= id {
                return Err(TensorError::Invalid(format!(
                    "node {id} ({}) references unknown node {}",
                    op.name(),
                    v.0
                )));
            }
        }
        let fwd = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&values).map_err(|e| e.at(id, op.name()))?
        };
        if !fwd.value.is_finite() {
            return Err(TensorError::NonFinite { node: id, op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            kind: Kind::Op(Box::new(op)),
            inputs: inputs.iter().map(|v| v.0).collect(),
            value: fwd.value,
            saved: fwd.saved,
            requires_grad,
        });
        Ok(Var(id))
    }

    /// Replace a leaf value. The tape is stale until the next [`Tape::eval`].
    pub fn set_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(v.0).ok_or(TensorError::NotLeaf(v.0))?;
        if !matches!(node.kind, Kind::Leaf) {
            return Err(TensorError::NotLeaf(v.0));
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                node: v.0,
                op: "leaf",
                detail: format!("expected {:?}, got {:?}", node.value.shape(), value.shape()),
            });
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    /// Re-run every recorded op in order against the current leaf values.
    pub fn eval(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &mut tail[0];
            let Kind::Op(op) = &node.kind else { continue };
            let fwd = {
                let values: Vec<&Tensor> = node.inputs.iter().map(|&i| &head[i].value).collect();
                op.forward(&values).map_err(|e| e.at(id, op.name()))?
            };
            if !fwd.value.is_finite() {
                return Err(TensorError::NonFinite { node: id, op: op.name() });
            }
            node.value = fwd.value;
            node.saved = fwd.saved;
        }
        self.stale = false;
        Ok(())
    }

    /// Set several leaves and replay the tape.
    pub fn eval_with(&mut self, inputs: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in inputs {
            self.set_value(*v, t.clone())?;
        }
        self.eval()
    }

    /// Backward pass seeded with ones.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.shape(output).to_vec(), 1.0);
        self.backward_with_seed(output, &seed)
    }

    pub fn backward_with_seed(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.stale {
            return Err(TensorError::NotEvaluated);
        }
        let out_shape = self.shape(output);
        if seed.shape() != out_shape {
            return Err(TensorError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            adj[output.0] = Some(seed.clone());
        }
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Kind::Op(op) = &node.kind else { continue };
            let Some(grad) = adj[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                saved: node.saved.as_deref(),
                needs: &needs,
            };
            let grads = op.backward(&ctx);
            debug_assert_eq!(grads.len(), node.inputs.len(), "{} returned wrong arity", op.name());
            for ((&input, g), need) in node.inputs.iter().zip(grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.len(), self.nodes[input].value.len(), "{} grad size", op.name());
                match &mut adj[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            // Keep the adjoint for inspection of intermediate nodes.
            adj[id] = Some(grad);
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like the value on `tape`.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v).to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.adj.get_mut(v.0).and_then(|g| g.take())
    }
}
