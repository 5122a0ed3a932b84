//! Adaptive moment optimizer with decoupled weight decay and a cosine
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::scalar::Scalar;

/// Cosine decay from `initial` to `final_lr` over `horizon_steps` optimizer
/// steps; constant at `final_lr` afterwards. Monotonically non-increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineSchedule {
    pub initial: f64,
    pub final_lr: f64,
    pub horizon_steps: usize,
}

impl CosineSchedule {
    pub fn new(initial: f64, final_lr: f64, horizon_steps: usize) -> Self {
        Self { initial, final_lr, horizon_steps }
    }

    /// Learning rate applied at (0-based) step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.horizon_steps <= 1 {
            return if t == 0 { self.initial } else { self.final_lr };
        }
        let last = self.horizon_steps - 1;
        let progress = (t.min(last)) as f64 / last as f64;
        self.final_lr + 0.5 * (self.initial - self.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW over a fixed set of trainable parameters.
///
/// Holds first/second moment accumulators shaped like their parameters, the
/// step counter, and the schedule. One `step` consumes the gradients
/// accumulated by backward; stepping without gradients is an error.
pub struct AdamW<T: Scalar> {
    params: Vec<Parameter<T>>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step_count: usize,
    schedule: CosineSchedule,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: Vec<Parameter<T>>, schedule: CosineSchedule, weight_decay: f64) -> Self {
        let m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        let v = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            params,
            m,
            v,
            step_count: 0,
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn steps_taken(&self) -> usize {
        self.step_count
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step_count)
    }

    /// Apply one update from the accumulated gradients, then advance the
    /// schedule. Gradients are consumed.
    pub fn step(&mut self) -> Result<()> {
        let lr = T::of(self.current_lr());
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let eps = T::of(self.eps);
        let wd = T::of(self.weight_decay);
        let t = self.step_count + 1;
        let bc1 = T::of(1.0 - self.beta1.powi(t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(t as i32));
        for (idx, p) in self.params.iter().enumerate() {
            let g = p
                .take_grad()
                .ok_or_else(|| Error::StepBeforeBackward { param: p.name().to_string() })?;
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let mut non_finite = false;
            p.update(|i, theta| {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let next = theta - lr * mhat / (vhat.sqrt() + eps) - lr * wd * theta;
                if !next.is_finite() {
                    non_finite = true;
                }
                next
            });
            if non_finite {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
        }
        self.step_count += 1;
        Ok(())
    }
}
