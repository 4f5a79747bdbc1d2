use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::{IntoShape, Scalar, Shape};
use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backward rules.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// What a backward rule sees: the upstream gradient, the forward output,
/// and which inputs actually want a gradient.
pub(crate) struct BackwardCtx<'a, T> {
    pub grad: &'a [T],
    pub output: &'a [T],
    pub needs: &'a [bool],
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Op<T: Scalar> {
    name: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: usize,
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Reference-counted handle to an immutable tensor node.
///
/// Cloning is cheap and shares the node (and its gradient slot).
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Shape, data: Vec<T>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    fn checked(data: Vec<T>, shape: impl IntoShape) -> Result<(Shape, Vec<T>)> {
        let shape = shape.into_shape()?;
        if shape.numel() != data.len() {
            return Err(Error::ElementCount {
                from: Shape::new(vec![data.len()]).unwrap_or_default(),
                from_numel: data.len(),
                to: shape.dims().to_vec(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok((shape, data))
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: impl IntoShape) -> Result<Self> {
        let (shape, data) = Self::checked(data, shape)?;
        Ok(Self::build(shape, data, false, None))
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<T>, shape: impl IntoShape) -> Result<Self> {
        let (shape, data) = Self::checked(data, shape)?;
        Ok(Self::build(shape, data, true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Shape::scalar(), vec![v], false, None)
    }

    pub fn zeros(shape: impl IntoShape) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl IntoShape, v: T) -> Result<Self> {
        let shape = shape.into_shape()?;
        let data = vec![v; shape.numel()];
        Self::new(data, shape)
    }

    /// Records the result of an operation. Inputs that do not require grad
    /// are still kept alive by the rule but never receive a gradient.
    pub(crate) fn from_op<F>(
        name: &'static str,
        shape: Shape,
        data: Vec<T>,
        inputs: Vec<Tensor<T>>,
        backward: F,
    ) -> Result<Self>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        debug_assert_eq!(shape.numel(), data.len(), "{name}: output size");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = requires_grad.then(|| Op {
            name,
            inputs,
            backward: Box::new(backward),
        });
        Ok(Self::build(shape, data, requires_grad, op))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &Shape {
        &self.0.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.0.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {}", self.shape());
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::build(self.0.shape.clone(), data, self.0.requires_grad && self.0.op.is_none(), None)
    }

    /// Back-propagates from this scalar into every reachable tensor that
    /// requires grad. Gradients accumulate across calls until reset.
    pub fn backward(&self) -> Result<()> {
        Tape::record(self)?.replay()
    }
}

/// Operations reachable from a loss, ordered so that every operation
/// appears after all of its inputs.
pub struct Tape<T: Scalar> {
    root: Tensor<T>,
    nodes: Vec<Tensor<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn record(loss: &Tensor<T>) -> Result<Self> {
        if loss.numel() != 1 {
            return Err(Error::NotScalar(loss.shape().clone()));
        }
        if !loss.requires_grad() {
            return Err(Error::Detached);
        }
        let mut seen = HashSet::new();
        let mut stack = vec![loss.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.0.op {
                stack.extend(op.inputs.iter().filter(|i| i.requires_grad()).cloned());
            }
            nodes.push(t);
        }
        // Ids are handed out at creation, so inputs always precede outputs.
        nodes.sort_by_key(Tensor::id);
        Ok(Tape { root: loss.clone(), nodes })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order (leaves show as `leaf`).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|t| t.op_name().unwrap_or("leaf")).collect()
    }

    pub fn replay(&self) -> Result<()> {
        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.root.id(), vec![T::one()]);
        for node in self.nodes.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let needs: Vec<bool> = op.inputs.iter().map(Tensor::requires_grad).collect();
                let ctx = BackwardCtx {
                    grad: &grad,
                    output: node.data(),
                    needs: &needs,
                };
                let grads = (op.backward)(&ctx);
                debug_assert_eq!(grads.len(), op.inputs.len(), "{}: gradient arity", op.name);
                for (input, g) in op.inputs.iter().zip(grads) {
                    let Some(g) = g else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(g.len(), input.numel(), "{}: gradient size", op.name);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteGrad { op: op.name });
                    }
                    match pending.get_mut(&input.id()) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(input.id(), g);
                        }
                    }
                }
            }
            let mut slot = node.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += *b),
                None => *slot = Some(grad),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], [2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_requires_connection() {
        let x = Tensor::<f64>::new(vec![1.0, 2.0], [2]).unwrap();
        let s = x.sum().unwrap();
        assert!(matches!(s.backward(), Err(Error::Detached)));
    }

    #[test]
    fn tape_is_topological() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], [3]).unwrap();
        let y = x.mul(&x).unwrap().relu().unwrap();
        let loss = y.add(&x).unwrap().sum().unwrap();
        let tape = Tape::record(&loss).unwrap();
        assert_eq!(tape.op_names(), vec!["leaf", "mul", "relu", "add", "sum"]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f64>::param(vec![1.0], [1]).unwrap();
        let y = no_grad(|| x.scale(2.0).unwrap());
        assert!(!y.requires_grad());
        assert!(x.scale(2.0).unwrap().requires_grad());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], [2]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_finite_inputs_rejected() {
        assert!(Tensor::<f64>::new(vec![f64::NAN], [1]).is_err());
    }
}
