use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{invalid, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Numeric precision of recorded values.
///
/// `F32` keeps f64 storage but rounds every op output through f32, which
/// reproduces single-precision forward behaviour without a second kernel set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Vector-Jacobian product: (upstream grad, op output, parent values) -> parent grads.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[Rc<Tensor>]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order, so the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

/// Gradients produced by one backward pass. Only leaves that requested
/// differentiation keep their gradient.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    visits: usize,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of nodes whose vector-Jacobian product was evaluated.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: RefCell::default(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value identical to `x`, with no path back into the graph.
    pub fn stop_gradient(&self, x: Var) -> Var {
        let value = (*self.value(x)).clone();
        self.push(value, Vec::new(), None, false)
    }

    fn push(
        &self,
        mut value: Tensor,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        if self.precision == Precision::F32 {
            value.round_f32();
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records the output of a differentiable op.
    pub(crate) fn op(
        &self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &Tensor, &[Rc<Tensor>]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(
            value,
            parents.to_vec(),
            Some(Box::new(backward)),
            requires_grad,
        )
    }

    /// Backward pass from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let n = self.value(loss).numel();
        if n != 1 {
            return Err(invalid(
                "backward",
                format!("loss must have one element, got {n}"),
            ));
        }
        self.backward_with(loss, Tensor::ones(&self.shape(loss)))
    }

    /// Backward pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[out.0].value.shape() {
            return Err(invalid("backward", "seed shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let mut visits = 0;
        if nodes[out.0].requires_grad {
            grads[out.0] = Some(seed);
        }
        for id in (0..=out.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            visits += 1;
            let parent_values: Vec<Rc<Tensor>> =
                node.parents.iter().map(|p| nodes[p.0].value.clone()).collect();
            let parent_grads = backward(&upstream, &node.value, &parent_values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p.0].value.shape());
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Grads { grads, visits })
    }
}
