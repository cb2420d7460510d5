use std::collections::BTreeMap;

use super::ops::Op;
use super::{ParamKey, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<R: Real> {
    pub(crate) value: Tensor<R>,
    pub(crate) op: Op<R>,
    /// Whether any gradient can flow into this node.
    pub(crate) tracked: bool,
    pub(crate) param: Option<ParamKey>,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so index order is a valid
/// topological order and the reverse sweep visits every op exactly once.
pub struct Tape<R: Real = f32> {
    pub(crate) nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a parameter or input by copy. Gradients flow back to it iff
    /// the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor<R>) -> Result<Var> {
        let mut value = t.clone();
        value.grad = None;
        let tracked = t.requires_grad;
        self.push_leaf(value, tracked, tracked.then_some(t.key))
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push_leaf(t, false, None)
    }

    /// Records a value whose gradient is wanted (via [`Gradients::wrt`])
    /// without it being a parameter.
    pub fn input(&mut self, t: Tensor<R>) -> Result<Var> {
        self.push_leaf(t, true, None)
    }

    fn push_leaf(&mut self, mut value: Tensor<R>, tracked: bool, param: Option<ParamKey>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        value.grad = None;
        self.nodes.push(Node { value, op: Op::Leaf, tracked, param });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn push(&mut self, value: Tensor<R>, op: Op<R>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let tracked = op.parents().iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { value, op, tracked, param: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let seed = Tensor::full(shape.to_vec(), R::one());
        self.backward_from(loss, &seed)
    }

    /// Vector-Jacobian product: propagates `seed` (the gradient of some
    /// external objective with respect to `root`) back to every tracked leaf.
    pub fn backward_from(&self, root: Var, seed: &Tensor<R>) -> Result<Gradients<R>> {
        if seed.shape() != self.shape(root) {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match root {:?}",
                seed.shape(),
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(seed.data().to_vec());
        let mut leaves = BTreeMap::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            let tracked = |v: Var| self.nodes[v.0].tracked;
            for (parent, pg) in node.op.backward(self, &node.value, &g, &tracked)? {
                if !tracked(parent) {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params: BTreeMap<ParamKey, Vec<R>> = BTreeMap::new();
        for (&i, g) in &leaves {
            if let Some(key) = self.nodes[i].param {
                match params.get_mut(&key) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        params.insert(key, g.clone());
                    }
                }
            }
        }
        let shapes = leaves.keys().map(|&i| (i, self.nodes[i].value.shape().to_vec())).collect();
        Ok(Gradients { leaves, shapes, params })
    }
}

/// Result of a reverse sweep.
pub struct Gradients<R: Real = f32> {
    leaves: BTreeMap<usize, Vec<R>>,
    shapes: BTreeMap<usize, Vec<usize>>,
    params: BTreeMap<ParamKey, Vec<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient with respect to a tracked leaf.
    pub fn wrt(&self, v: Var) -> Option<Tensor<R>> {
        let g = self.leaves.get(&v.0)?;
        Tensor::new(self.shapes[&v.0].clone(), g.clone()).ok()
    }

    /// Summed gradient for every leaf recorded from `param`.
    pub fn param(&self, param: &Tensor<R>) -> Option<&[R]> {
        self.params.get(&param.key()).map(Vec::as_slice)
    }

    /// Adds this sweep's gradients into each parameter's buffer.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Tensor<R>>) -> Result<()> {
        for p in params {
            if let Some(g) = self.params.get(&p.key()) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
