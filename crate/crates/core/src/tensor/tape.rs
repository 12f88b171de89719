use std::sync::atomic::{AtomicU64, Ordering};

use super::{Float, Result, Tensor, TensorError};

/// Computes input gradients from the output gradient. The flags say which
/// inputs actually need one; entries for the others may be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync>;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

struct Node<T: Float> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Append-only record of executed operations. Nodes are stored in execution
/// order, which is a topological order of the computation graph.
pub struct Tape<T: Float> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are kept for it after [`Tape::backward`]
    /// if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node { value: tensor, parents: Vec::new(), backward: None });
        self.var(self.nodes.len() - 1)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.detach())
    }

    fn var(&self, index: usize) -> Var {
        Var { index, tape: self.id }
    }

    fn index(&self, var: Var) -> Result<usize> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(var.index)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(var)?].value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.value(var)?.requires_grad)
    }

    /// Accumulated gradient of a leaf after one or more backward passes.
    pub fn grad(&self, var: Var) -> Result<Option<&[T]>> {
        Ok(self.value(var)?.grad())
    }

    pub fn grad_tensor(&self, var: Var) -> Result<Option<Tensor<T>>> {
        Ok(self.value(var)?.grad_tensor())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    /// Appends an operation result. The backward rule is kept only when some
    /// parent requires gradients.
    pub(crate) fn push(
        &mut self,
        mut value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Result<Var> {
        let mut indices = Vec::with_capacity(parents.len());
        for &p in parents {
            indices.push(self.index(p)?);
        }
        let tracked = indices.iter().any(|&i| self.nodes[i].value.requires_grad);
        value.requires_grad = tracked;
        value.grad = None;
        let node = if tracked {
            Node { value, parents: indices, backward: Some(Box::new(backward)) }
        } else {
            Node { value, parents: Vec::new(), backward: None }
        };
        self.nodes.push(node);
        Ok(self.var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar. Leaf gradients are added to whatever the
    /// leaves already hold.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.index(loss)?;
        let root_value = &self.nodes[root].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root_value.shape().to_vec()));
        }
        if !root_value.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                None => {
                    if node.value.requires_grad && node.parents.is_empty() {
                        self.nodes[i].value.accumulate_grad(&g)?;
                    }
                }
                Some(rule) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].value.requires_grad).collect();
                    let parent_grads = rule(&g, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), self.nodes[p].value.numel());
                        match &mut grads[p] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &d)| *a += d),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
