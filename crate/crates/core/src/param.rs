//! Learnable parameters and named parameter collections.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{GradSink, Tape, Tensor};

/// Persistent learnable tensor: value storage, gradient accumulator, and a
/// trainable flag that the freezing logic flips.
pub struct Parameter<T: Scalar> {
    name: String,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<T>>>,
    grad: GradSink<T>,
    trainable: Rc<Cell<bool>>,
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            grad: Rc::clone(&self.grad),
            trainable: Rc::clone(&self.trainable),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter({} {:?})", self.name, self.shape)
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: &str, shape: &[usize], values: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch {
                op: "parameter",
                detail: format!("{name}: shape {shape:?} holds {n} values, got {}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "parameter" });
        }
        Ok(Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Rc::new(RefCell::new(values)),
            grad: Rc::new(RefCell::new(None)),
            trainable: Rc::new(Cell::new(true)),
        })
    }

    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n]).expect("zeros always valid")
    }

    /// Uniform init in (-scale, scale).
    pub fn uniform(name: &str, shape: &[usize], scale: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| T::of(rng.range(-scale, scale))).collect();
        Self::new(name, shape, values).expect("uniform init is finite")
    }

    /// Identity matrix scaled by `gain`.
    pub fn scaled_identity(name: &str, n: usize, gain: f64) -> Self {
        let mut values = vec![T::zero(); n * n];
        for i in 0..n {
            values[i * n + i] = T::of(gain);
        }
        Self::new(name, &[n, n], values).expect("identity init is finite")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.trainable.set(trainable);
    }

    pub fn values(&self) -> Vec<T> {
        self.data.borrow().clone()
    }

    pub fn set_values(&self, values: &[T]) {
        let mut data = self.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "{}: value length mismatch", self.name);
        data.copy_from_slice(values);
    }

    /// In-place update used by the optimizer.
    pub fn update<F: FnMut(usize, T) -> T>(&self, mut f: F) {
        let mut data = self.data.borrow_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    /// Forward-pass view of the current values.
    ///
    /// With a tape and the trainable flag set this registers a leaf whose
    /// gradient accumulates into this parameter; otherwise it is a constant.
    /// The value buffer is snapshotted so later in-place updates cannot
    /// retroactively change a recorded forward pass.
    pub fn tensor(&self, tape: Option<&Tape<T>>) -> Tensor<T> {
        let snapshot = Rc::new(self.data.borrow().clone());
        match tape {
            Some(tape) if self.trainable.get() => {
                tape.leaf(snapshot, self.shape.clone(), Rc::clone(&self.grad))
            }
            _ => Tensor::from_parts(self.shape.clone(), snapshot),
        }
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad.borrow().clone()
    }

    /// Take and clear the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Add `g` into the gradient accumulator (used when merging per-sample
    /// gradients in a fixed order).
    pub fn accumulate_grad(&self, g: &[T]) {
        assert_eq!(g.len(), self.len(), "{}: gradient length mismatch", self.name);
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += *x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Ordered, name-indexed collection of parameters.
///
/// Registration order is the serialization order, so checkpoints are
/// byte-stable for a fixed model construction sequence.
#[derive(Default)]
pub struct ParamSet<T: Scalar> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, p: Parameter<T>) -> Parameter<T> {
        assert!(
            !self.index.contains_key(p.name()),
            "duplicate parameter name '{}'",
            p.name()
        );
        self.index.insert(p.name().to_string(), self.params.len());
        self.params.push(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Split by a name predicate; left = matching, right = rest.
    pub fn partition<F: Fn(&str) -> bool>(&self, pred: F) -> (Vec<Parameter<T>>, Vec<Parameter<T>>) {
        let mut yes = Vec::new();
        let mut no = Vec::new();
        for p in &self.params {
            if pred(p.name()) {
                yes.push(p.clone());
            } else {
                no.push(p.clone());
            }
        }
        (yes, no)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_snapshot_isolates_forward_values() {
        let p = Parameter::<f64>::new("w", &[2], vec![1.0, 2.0]).unwrap();
        let t = p.tensor(None);
        p.set_values(&[9.0, 9.0]);
        assert_eq!(t.data(), &[1.0, 2.0]);
        assert_eq!(p.values(), vec![9.0, 9.0]);
    }

    #[test]
    fn frozen_parameter_is_constant_on_tape() {
        let p = Parameter::<f64>::new("w", &[1], vec![2.0]).unwrap();
        p.set_trainable(false);
        let tape = Tape::new();
        let t = p.tensor(Some(&tape));
        assert!(!t.requires_grad());
    }

    #[test]
    fn paramset_rejects_duplicates() {
        let mut set = ParamSet::<f64>::new();
        set.register(Parameter::zeros("a", &[1]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            set.register(Parameter::zeros("a", &[1]));
        }));
        assert!(result.is_err());
    }

    #[test]
    fn partition_covers_all_disjointly() {
        let mut set = ParamSet::<f64>::new();
        set.register(Parameter::zeros("skip.w", &[2]));
        set.register(Parameter::zeros("enc.w", &[3]));
        let (adapt, backbone) = set.partition(|n| n.starts_with("skip."));
        assert_eq!(adapt.len(), 1);
        assert_eq!(backbone.len(), 1);
        assert_eq!(adapt[0].name(), "skip.w");
    }
}
