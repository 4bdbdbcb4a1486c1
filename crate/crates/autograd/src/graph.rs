use std::cell::{Ref, RefCell};

use crate::{Float, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Values handed to a node's backward function.
pub struct BackwardArgs<'a, T> {
    /// Gradient of the scalar objective with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// Forward values of the node's inputs, in the order they were recorded.
    pub inputs: Vec<&'a Tensor<T>>,
    /// Forward value of the node itself.
    pub output: &'a Tensor<T>,
}

/// Maps an output gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Define-by-run tape. Every operation appends a node; [`Graph::backward`]
/// walks the tape in reverse.
///
/// A graph is single-threaded and meant to live for one forward/backward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Leaf that receives a gradient (parameters, inputs under test).
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: vec![],
            backward: None,
            requires_grad: true,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            inputs: vec![],
            backward: None,
            requires_grad: false,
        })
    }

    /// Copy of `v` cut off from gradient flow.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// Records an operation whose output was computed by the caller.
    ///
    /// `backward` is only kept when at least one input requires a gradient.
    pub fn custom(
        &self,
        inputs: &[Var],
        output: Tensor<T>,
        backward: impl Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        self.push(Node {
            value: output,
            inputs: inputs.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// Only leaf gradients are retained in the result.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(
            nodes[root.0].value.len(),
            1,
            "backward() needs a scalar root, got shape {:?}",
            nodes[root.0].value.shape()
        );
        if !nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let args = BackwardArgs {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| &nodes[v.0].value).collect(),
                output: &node.value,
            };
            let input_grads = backward(&args);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
