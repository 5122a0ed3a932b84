//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Values are immutable once constructed; differentiable operations record a
//! node on a [`Tape`] when at least one operand is attached to one. Backward
//! walks the recorded nodes in reverse push order (which is topological by
//! construction) and accumulates gradients into the leaf sinks registered by
//! [`crate::param::Parameter`].
//!
//! Tensors without a tape attachment compose eagerly with zero recording
//! overhead, which is what inference uses.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradient accumulator shared between a tape leaf and its owner.
pub(crate) type GradSink<T> = Rc<RefCell<Option<Vec<T>>>>;

/// Backward map: output gradient plus a per-input "gradient needed" mask,
/// returning one gradient buffer per input (`None` where not needed).
pub(crate) type BackFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    parents: Vec<usize>,
    backward: Box<dyn Fn(&[T]) -> Vec<Vec<T>>>,
    sink: Option<GradSink<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

/// Ordered record of differentiable operations for one forward pass.
///
/// Every node is pushed after its parents, so reverse iteration is a valid
/// reverse-topological traversal. A tape supports exactly one backward pass;
/// replaying without re-recording is an error.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), spent: false })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether backward has already consumed this tape.
    pub fn is_spent(&self) -> bool {
        self.inner.borrow().spent
    }

    fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, parents: Vec<usize>, backward: Box<dyn Fn(&[T]) -> Vec<Vec<T>>>, sink: Option<GradSink<T>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { parents, backward, sink });
        id
    }

    /// Register a leaf that flushes its accumulated gradient into `sink`.
    pub(crate) fn leaf(&self, data: Rc<Vec<T>>, shape: Vec<usize>, sink: GradSink<T>) -> Tensor<T> {
        let id = self.push(Vec::new(), Box::new(|_| Vec::new()), Some(sink));
        Tensor { shape, data, node: Some((self.clone(), id)) }
    }

    fn run_backward(&self, root: usize, root_len: usize) -> Result<()> {
        {
            let mut inner = self.inner.borrow_mut();
            if inner.spent {
                return Err(Error::TapeConsumed);
            }
            inner.spent = true;
        }
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one(); root_len]);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            if let Some(sink) = &node.sink {
                let mut slot = sink.borrow_mut();
                match slot.as_mut() {
                    Some(buf) => {
                        for (b, x) in buf.iter_mut().zip(&g) {
                            *b += *x;
                        }
                    }
                    None => *slot = Some(g.clone()),
                }
            }
            if node.parents.is_empty() {
                continue;
            }
            let parent_grads = (node.backward)(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                accumulate(&mut grads[p], pg);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(buf) => {
            debug_assert_eq!(buf.len(), g.len());
            for (b, x) in buf.iter_mut().zip(&g) {
                *b += *x;
            }
        }
    }
}

/// Dense n-dimensional tensor of real values in row-major order.
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    node: Option<(Tape<T>, usize)>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, requires_grad={})", self.shape, self.requires_grad())
    }
}

impl<T: Scalar> Tensor<T> {
    /// Build a constant tensor, rejecting shape/length disagreement and
    /// non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Self { shape: shape.to_vec(), data: Rc::new(data), node: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: Rc::new(vec![T::zero(); n]), node: None }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: Rc::new(vec![value; n]), node: None }
    }

    /// Scalar wrapped as a `[1]` tensor.
    pub fn scalar(value: T) -> Self {
        Self::full(&[1], value)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self { shape: vec![n, n], data: Rc::new(data), node: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() requires a scalar tensor");
        self.data[0]
    }

    /// Whether gradients flow through this tensor.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Constant copy sharing the value buffer; gradients stop here.
    pub fn detach(&self) -> Self {
        Self { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    pub fn assert_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into every
    /// leaf registered on the same tape. Errors on non-scalar tensors and on
    /// tapes that already ran backward.
    pub fn backward(&self) -> Result<()> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss { len: self.data.len() });
        }
        match &self.node {
            Some((tape, id)) => tape.run_backward(*id, 1),
            // A constant loss has zero gradient everywhere: nothing to do.
            None => Ok(()),
        }
    }

    /// Reinterpret the value buffer under a new shape of equal volume.
    /// Shares both data and tape node (gradients are flat).
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: Rc::clone(&self.data), node: self.node.clone() })
    }
}

/// Construct the result of a primitive op, recording a tape node when any
/// input carries one. `backward` receives the output gradient and the
/// per-input needs mask and must return a gradient for every input whose
/// mask is set.
pub(crate) fn make_node<T: Scalar>(
    op: &'static str,
    inputs: &[&Tensor<T>],
    shape: Vec<usize>,
    data: Vec<T>,
    backward: BackFn<T>,
) -> Result<Tensor<T>> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{op}: bad output volume");
    let mut tape: Option<&Tape<T>> = None;
    for t in inputs {
        if let Some((tp, _)) = &t.node {
            match tape {
                None => tape = Some(tp),
                Some(existing) if existing.same_tape(tp) => {}
                Some(_) => {
                    return Err(Error::ShapeMismatch {
                        op,
                        detail: "operands recorded on different tapes".into(),
                    })
                }
            }
        }
    }
    let Some(tape) = tape else {
        return Ok(Tensor { shape, data: Rc::new(data), node: None });
    };
    let needs: Vec<bool> = inputs.iter().map(|t| t.node.is_some()).collect();
    let parents: Vec<usize> = inputs
        .iter()
        .filter_map(|t| t.node.as_ref().map(|(_, id)| *id))
        .collect();
    let wrapper = {
        let needs = needs.clone();
        Box::new(move |g: &[T]| -> Vec<Vec<T>> {
            let all = backward(g, &needs);
            all.into_iter()
                .zip(&needs)
                .filter(|(_, n)| **n)
                .map(|(o, _)| o.expect("backward must produce a gradient for every tape input"))
                .collect()
        })
    };
    let id = tape.push(parents, wrapper, None);
    Ok(Tensor { shape, data: Rc::new(data), node: Some((tape.clone(), id)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;

    #[test]
    fn from_vec_validates_volume_and_finiteness() {
        assert!(Tensor::<f64>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2], vec![1.0, f64::INFINITY]).is_err());
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn quadratic_loss_gradient() {
        // loss = sum(x_i^2)  =>  grad = 2x
        let x = Parameter::new("x", &[3], vec![1.0, -2.0, 3.0]).unwrap();
        let tape = Tape::new();
        let xt = x.tensor(Some(&tape));
        let loss = xt.mul(&xt).unwrap().sum_all();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn second_backward_is_error() {
        let x = Parameter::new("x", &[2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let xt = x.tensor(Some(&tape));
        let loss = xt.mul(&xt).unwrap().sum_all();
        loss.backward().unwrap();
        let err = loss.backward().unwrap_err();
        assert!(matches!(err, Error::TapeConsumed));
    }

    #[test]
    fn backward_on_non_scalar_is_error() {
        let x = Parameter::new("x", &[2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let xt = x.tensor(Some(&tape));
        assert!(matches!(xt.backward(), Err(Error::NonScalarLoss { len: 2 })));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x*x + x  =>  grad = 2x + 1
        let x = Parameter::new("x", &[1], vec![3.0]).unwrap();
        let tape = Tape::new();
        let xt = x.tensor(Some(&tape));
        let loss = xt.mul(&xt).unwrap().add(&xt).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = Parameter::new("x", &[1], vec![3.0]).unwrap();
        let tape = Tape::new();
        let xt = x.tensor(Some(&tape));
        let loss = xt.detach().mul(&xt.detach()).unwrap().sum_all();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn reshape_shares_gradient_path() {
        let x = Parameter::new("x", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let xt = x.tensor(Some(&tape)).reshape(&[4]).unwrap();
        let loss = xt.mul(&xt).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn constant_loss_backward_is_noop() {
        let loss = Tensor::<f64>::scalar(5.0);
        loss.backward().unwrap();
    }
}
