//! Reverse-mode differentiation over a linear (Wengert) tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is already a
//! topological order and `backward` simply walks it in reverse.

use super::element::Element;
use super::tensor::Tensor;
use crate::error::{usage_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Function<T: Element> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: one gradient per parent, `None` where
    /// `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;

    /// Mixes the op's discrete branch decisions (relu signs, pooling argmax,
    /// clamps) into `state`. Finite differences are only meaningful between
    /// evaluations with identical signatures.
    fn kink_signature(&self, _inputs: &[&Tensor<T>], _state: &mut u64) {}
}

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<Var>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            func: None,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records the result of an operation. Non-finite results are rejected.
    pub fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        func: Box<dyn Function<T>>,
    ) -> Result<Var> {
        value.ensure_finite(func.name())?;
        if self.backward_done {
            return Err(usage_err!("tape already differentiated; start a new tape"));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents,
            func: Some(func),
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Populates `grad` on every node that requires it with d(root)/d(node).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(usage_err!("backward called twice on the same tape"));
        }
        let root_node = &self.nodes[root.0];
        if !root_node.value.is_scalar() {
            return Err(usage_err!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            ));
        }
        self.backward_done = true;
        if !root_node.requires_grad {
            return Ok(());
        }
        let seed = Tensor::full(root_node.value.shape(), T::one());
        self.nodes[root.0].grad = Some(seed);

        for idx in (0..=root.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(idx);
            let node = &mut tail[0];
            let (Some(func), Some(grad_out)) = (node.func.as_ref(), node.grad.as_ref()) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &head[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| head[p.0].requires_grad)
                .collect();
            let grads = func.backward(&inputs, &node.value, grad_out, &needs)?;
            let parents = node.parents.clone();
            for (p, g) in parents.into_iter().zip(grads) {
                let Some(g) = g else { continue };
                let slot = &mut head[p.0].grad;
                match slot {
                    Some(acc) => acc.add_assign(&g),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Hash of every recorded branch decision; see [`Function::kink_signature`].
    pub fn kink_signature(&self) -> u64 {
        let mut state = 0xcbf2_9ce4_8422_2325u64;
        for node in &self.nodes {
            if let Some(func) = &node.func {
                let inputs: Vec<&Tensor<T>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                func.kink_signature(&inputs, &mut state);
            }
        }
        state
    }
}

/// FNV-1a step used by kink signatures.
pub(crate) fn mix(state: &mut u64, value: u64) {
    for b in value.to_le_bytes() {
        *state ^= b as u64;
        *state = state.wrapping_mul(0x0100_0000_01b3);
    }
}

/// Scalar-valued reductions and products that the losses and tests build on.
struct SumAll;

impl<T: Element> Function<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), grad_out.data()[0]))])
    }
}

struct MeanAll;

impl<T: Element> Function<T> for MeanAll {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let n = T::from_usize(inputs[0].len()).unwrap();
        Ok(vec![Some(Tensor::full(
            inputs[0].shape(),
            grad_out.data()[0] / n,
        ))])
    }
}

struct Add;

impl<T: Element> Function<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![
            needs[0].then(|| grad_out.clone()),
            needs[1].then(|| grad_out.clone()),
        ])
    }
}

struct Dot;

impl<T: Element> Function<T> for Dot {
    fn name(&self) -> &'static str {
        "dot"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad_out.data()[0];
        let scaled = |t: &Tensor<T>| t.map(|v| v * g);
        Ok(vec![
            needs[0].then(|| scaled(inputs[1])),
            needs[1].then(|| scaled(inputs[0])),
        ])
    }
}

impl<T: Element> Tape<T> {
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, vec![x], Box::new(SumAll))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.push(v, vec![x], Box::new(MeanAll))
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(crate::error::config_err!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let mut v = ta.clone();
        v.add_assign(tb);
        self.push(v, vec![a, b], Box::new(Add))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(crate::error::config_err!(
                "dot of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            ));
        }
        let v = Tensor::scalar(ta.dot(tb));
        self.push(v, vec![a, b], Box::new(Dot))
    }
}
