//! Fast-weight sequence layer with a self-supervised inner loop.
//!
//! The layer projects its input into three views: a key view (per-token
//! linear map), a value view (temporal attention), and a query view (motion
//! attention). Scanning tokens in spatial-major order (all spatial positions
//! of a frame, then the next frame), it updates per-sequence fast weights `W`
//! by gradient descent on the reconstruction error `|k W - v|^2` and emits
//! `q W` with the current weights. Slow parameters (projections, `W0`, the
//! attention weights) are trained by the outer loop; `W` never outlives a
//! sequence and never crosses batch elements.
//!
//! Two outer-gradient modes exist: `Unrolled` differentiates through the
//! inner updates (the update is expressed with tape ops), `StopGradient`
//! treats the adapted weights as constants so only the query path carries
//! gradient. The inner loop runs identically at train and test time; only
//! `W` adapts at test time.

use crate::attention::{MotionAttention, TemporalAttention};
use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};
use crate::ops::stack_rows;

/// How outer-loop gradients treat the inner loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerGradMode {
    /// Differentiate through the unrolled inner updates (default).
    Unrolled,
    /// Detach the inner updates; gradient reaches the views only through the
    /// query projection and the un-adapted output path.
    StopGradient,
}

/// Inner-loop hyperparameters and mode switches.
#[derive(Clone, Debug, PartialEq)]
pub struct TttConfig {
    pub steps_per_token: usize,
    pub eta_inner: f64,
    pub grad_mode: InnerGradMode,
    /// Replace the attention view projections with plain linear maps
    /// (ablation toggle).
    pub linear_views: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            steps_per_token: 1,
            eta_inner: 0.01,
            grad_mode: InnerGradMode::Unrolled,
            linear_views: false,
        }
    }
}

/// Value/query view projections: task-specific attention by default, linear
/// maps under the ablation toggle.
pub enum ViewProjections<T: Scalar> {
    Attention { temporal: TemporalAttention<T>, motion: MotionAttention<T> },
    Linear { value_w: Parameter<T>, query_w: Parameter<T> },
}

/// Slow parameters of one fast-weight layer.
pub struct TttLayer<T: Scalar> {
    /// `[d,d]` key (training view) projection.
    pub key_w: Parameter<T>,
    pub views: ViewProjections<T>,
    /// `[d,d]` fast-weight initialization, outer-loop learnable.
    pub w0: Parameter<T>,
    pub cfg: TttConfig,
    d: usize,
}

/// Per-sequence fast weights. Reset to `W0` at every sequence start and
/// never shared across sequences.
#[derive(Clone, Debug)]
pub struct InnerState<T: Scalar> {
    pub w: Vec<T>,
    pub d: usize,
    pub tokens_consumed: usize,
}

impl<T: Scalar> InnerState<T> {
    pub fn from_w0(w0: &[T], d: usize) -> Self {
        assert_eq!(w0.len(), d * d);
        Self { w: w0.to_vec(), d, tokens_consumed: 0 }
    }
}

/// Squared reconstruction error of the linear inner model:
/// `|tok_k W - tok_v|^2`.
pub fn inner_loss<T: Scalar>(tok_k: &[T], tok_v: &[T], w: &[T], d: usize) -> T {
    debug_assert_eq!(tok_k.len(), d);
    debug_assert_eq!(tok_v.len(), d);
    debug_assert_eq!(w.len(), d * d);
    let mut total = T::zero();
    for j in 0..d {
        let mut r = -tok_v[j];
        for i in 0..d {
            r += tok_k[i] * w[i * d + j];
        }
        total += r * r;
    }
    total
}

/// One closed-form gradient step on the fast weights:
/// `W <- W - eta * 2 * tok_k^T (tok_k W - tok_v)`.
pub fn inner_step<T: Scalar>(
    state: &mut InnerState<T>,
    tok_k: &[T],
    tok_v: &[T],
    eta: T,
) -> Result<()> {
    let d = state.d;
    let mut resid = vec![T::zero(); d];
    for j in 0..d {
        let mut r = -tok_v[j];
        for i in 0..d {
            r += tok_k[i] * state.w[i * d + j];
        }
        resid[j] = r;
    }
    let two = T::of(2.0);
    let mut finite = true;
    for i in 0..d {
        let ki = two * tok_k[i];
        for j in 0..d {
            let next = state.w[i * d + j] - eta * ki * resid[j];
            if !next.is_finite() {
                finite = false;
            }
            state.w[i * d + j] = next;
        }
    }
    if !finite {
        return Err(Error::InnerLoopDiverged { token_index: state.tokens_consumed });
    }
    state.tokens_consumed += 1;
    Ok(())
}

/// Batch-mode step: the gradient is summed over the whole token set before a
/// single update, all residuals taken at the incoming weights.
pub fn inner_step_batch<T: Scalar>(
    state: &mut InnerState<T>,
    toks_k: &[Vec<T>],
    toks_v: &[Vec<T>],
    eta: T,
) -> Result<()> {
    assert_eq!(toks_k.len(), toks_v.len());
    let d = state.d;
    let mut grad = vec![T::zero(); d * d];
    let two = T::of(2.0);
    for (k, v) in toks_k.iter().zip(toks_v) {
        let mut resid = vec![T::zero(); d];
        for j in 0..d {
            let mut r = -v[j];
            for i in 0..d {
                r += k[i] * state.w[i * d + j];
            }
            resid[j] = r;
        }
        for i in 0..d {
            let ki = two * k[i];
            for j in 0..d {
                grad[i * d + j] += ki * resid[j];
            }
        }
    }
    let mut finite = true;
    for (wij, gij) in state.w.iter_mut().zip(&grad) {
        *wij = *wij - eta * *gij;
        if !wij.is_finite() {
            finite = false;
        }
    }
    if !finite {
        return Err(Error::InnerLoopDiverged { token_index: state.tokens_consumed });
    }
    state.tokens_consumed += toks_k.len();
    Ok(())
}

impl<T: Scalar> TttLayer<T> {
    /// `d` is the per-token channel width; `t` and `reduction` shape the
    /// temporal-attention view.
    pub fn init(prefix: &str, d: usize, t: usize, reduction: usize, cfg: TttConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.eta_inner <= 0.0 {
            return Err(Error::Config("inner learning rate must be positive".into()));
        }
        let scale = (2.0 / (d + d) as f64).sqrt();
        let views = if cfg.linear_views {
            ViewProjections::Linear {
                value_w: Parameter::uniform(&format!("{prefix}.value_w"), &[d, d], scale, rng),
                query_w: Parameter::uniform(&format!("{prefix}.query_w"), &[d, d], scale, rng),
            }
        } else {
            ViewProjections::Attention {
                temporal: TemporalAttention::init(&format!("{prefix}.ta"), t, d, reduction, rng)?,
                motion: MotionAttention::init(&format!("{prefix}.me"), d, rng),
            }
        };
        Ok(Self {
            key_w: Parameter::uniform(&format!("{prefix}.key_w"), &[d, d], scale, rng),
            views,
            // identity-scaled start keeps the un-adapted layer near pass-through
            w0: Parameter::scaled_identity(&format!("{prefix}.w0"), d, 0.9),
            cfg,
            d,
        })
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = vec![self.key_w.clone()];
        match &self.views {
            ViewProjections::Attention { temporal, motion } => {
                out.extend(temporal.params());
                out.extend(motion.params());
            }
            ViewProjections::Linear { value_w, query_w } => {
                out.push(value_w.clone());
                out.push(query_w.clone());
            }
        }
        out.push(self.w0.clone());
        out
    }

    pub fn token_width(&self) -> usize {
        self.d
    }

    /// Project the input into (key, value, query) views, all shape-equal to
    /// the input.
    pub fn make_views(
        &self,
        h: &Tensor<T>,
        tape: Option<&Tape<T>>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let s = h.shape();
        if s.len() != 5 || s[2] != self.d {
            return Err(Error::ShapeMismatch {
                op: "make_views",
                detail: format!("expected [B,T,{},H,W], got {s:?}", self.d),
            });
        }
        let key = self.per_token_linear(h, &self.key_w, tape)?;
        let (value, query) = match &self.views {
            ViewProjections::Attention { temporal, motion } => {
                (temporal.forward(h, tape)?, motion.forward(h, tape)?)
            }
            ViewProjections::Linear { value_w, query_w } => (
                self.per_token_linear(h, value_w, tape)?,
                self.per_token_linear(h, query_w, tape)?,
            ),
        };
        Ok((key, value, query))
    }

    fn per_token_linear(
        &self,
        h: &Tensor<T>,
        w: &Parameter<T>,
        tape: Option<&Tape<T>>,
    ) -> Result<Tensor<T>> {
        let s = h.shape().to_vec();
        let (b, t, c, hh, ww) = (s[0], s[1], s[2], s[3], s[4]);
        let tokens = h.permute(&[0, 1, 3, 4, 2])?.reshape(&[b * t * hh * ww, c])?;
        tokens
            .matmul(&w.tensor(tape))?
            .reshape(&[b, t, hh, ww, c])?
            .permute(&[0, 1, 4, 2, 3])
    }

    /// Run the fast-weight scan over one batch of sequences.
    ///
    /// `steps_override` forces the per-token update count (0 disables
    /// adaptation entirely); otherwise the configured value applies. Fast
    /// weights start from `W0` per batch element and are discarded on return.
    pub fn forward_sequence(
        &self,
        h: &Tensor<T>,
        tape: Option<&Tape<T>>,
        steps_override: Option<usize>,
    ) -> Result<Tensor<T>> {
        let s = h.shape().to_vec();
        if s.len() != 5 || s[2] != self.d {
            return Err(Error::ShapeMismatch {
                op: "forward_sequence",
                detail: format!("expected [B,T,{},H,W], got {s:?}", self.d),
            });
        }
        let (b, t, c, hh, ww) = (s[0], s[1], s[2], s[3], s[4]);
        let d = self.d;
        let steps = steps_override.unwrap_or(self.cfg.steps_per_token);
        let eta = T::of(self.cfg.eta_inner);
        let (key, value, query) = self.make_views(h, tape)?;
        // spatial-major token order: row index (t * H*W + y*W + x) per element
        let tokens_per_seq = t * hh * ww;
        let to_rows = |v: &Tensor<T>| -> Result<Tensor<T>> {
            v.permute(&[0, 1, 3, 4, 2])?.reshape(&[b * tokens_per_seq, c])
        };
        let key_rows = to_rows(&key)?;
        let value_rows = to_rows(&value)?;
        let query_rows = to_rows(&query)?;

        let unrolled = matches!(self.cfg.grad_mode, InnerGradMode::Unrolled);
        let mut out_rows: Vec<Tensor<T>> = Vec::with_capacity(b * tokens_per_seq);
        for bi in 0..b {
            let base = bi * tokens_per_seq;
            if unrolled {
                let mut w = self.w0.tensor(tape);
                for n in 0..tokens_per_seq {
                    let row = base + n;
                    let k_tok = key_rows.slice_rows(row, row + 1)?;
                    let v_tok = value_rows.slice_rows(row, row + 1)?;
                    for _ in 0..steps {
                        let resid = k_tok.matmul(&w)?.sub(&v_tok)?;
                        let grad = k_tok.reshape(&[d, 1])?.matmul(&resid)?.scale(T::of(2.0));
                        w = w.sub(&grad.scale(eta))?;
                    }
                    if steps > 0 && w.data().iter().any(|v| !v.is_finite()) {
                        return Err(Error::InnerLoopDiverged { token_index: n });
                    }
                    out_rows.push(query_rows.slice_rows(row, row + 1)?.matmul(&w)?);
                }
            } else {
                let mut state = InnerState::from_w0(&self.w0.values(), d);
                for n in 0..tokens_per_seq {
                    let row = base + n;
                    let k_tok = key_rows.slice_rows(row, row + 1)?.detach();
                    let v_tok = value_rows.slice_rows(row, row + 1)?.detach();
                    for _ in 0..steps {
                        inner_step(&mut state, k_tok.data(), v_tok.data(), eta)
                            .map_err(|_| Error::InnerLoopDiverged { token_index: n })?;
                    }
                    let w_const = Tensor::from_parts(vec![d, d], std::rc::Rc::new(state.w.clone()));
                    out_rows.push(query_rows.slice_rows(row, row + 1)?.matmul(&w_const)?);
                }
            }
        }
        stack_rows(&out_rows)?
            .reshape(&[b, t, hh, ww, c])?
            .permute(&[0, 1, 4, 2, 3])
    }
}

/// One residual translator block: layer norm and the fast-weight scan in the
/// first residual branch, layer norm and a two-layer gelu feedforward in the
/// second. Norms and the feedforward act on the merged time-channel width at
/// each spatial position.
pub struct TttBlock<T: Scalar> {
    pub ln1_gamma: Parameter<T>,
    pub ln1_beta: Parameter<T>,
    pub ttt: TttLayer<T>,
    pub ln2_gamma: Parameter<T>,
    pub ln2_beta: Parameter<T>,
    pub ff_w1: Parameter<T>,
    pub ff_b1: Parameter<T>,
    pub ff_w2: Parameter<T>,
    pub ff_b2: Parameter<T>,
    merged: usize,
}

impl<T: Scalar> TttBlock<T> {
    pub fn init(
        prefix: &str,
        d: usize,
        t: usize,
        reduction: usize,
        ff_hidden: usize,
        cfg: TttConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let merged = t * d;
        let ones = vec![T::one(); merged];
        let scale1 = (2.0 / (merged + ff_hidden) as f64).sqrt();
        Ok(Self {
            ln1_gamma: Parameter::new(&format!("{prefix}.ln1.gamma"), &[merged], ones.clone())?,
            ln1_beta: Parameter::zeros(&format!("{prefix}.ln1.beta"), &[merged]),
            ttt: TttLayer::init(&format!("{prefix}.ttt"), d, t, reduction, cfg, rng)?,
            ln2_gamma: Parameter::new(&format!("{prefix}.ln2.gamma"), &[merged], ones)?,
            ln2_beta: Parameter::zeros(&format!("{prefix}.ln2.beta"), &[merged]),
            ff_w1: Parameter::uniform(&format!("{prefix}.ff.w1"), &[merged, ff_hidden], scale1, rng),
            ff_b1: Parameter::zeros(&format!("{prefix}.ff.b1"), &[ff_hidden]),
            ff_w2: Parameter::uniform(&format!("{prefix}.ff.w2"), &[ff_hidden, merged], scale1, rng),
            ff_b2: Parameter::zeros(&format!("{prefix}.ff.b2"), &[merged]),
            merged,
        })
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        let mut out = vec![self.ln1_gamma.clone(), self.ln1_beta.clone()];
        out.extend(self.ttt.params());
        out.extend([
            self.ln2_gamma.clone(),
            self.ln2_beta.clone(),
            self.ff_w1.clone(),
            self.ff_b1.clone(),
            self.ff_w2.clone(),
            self.ff_b2.clone(),
        ]);
        out
    }

    /// `[B,T,C,H,W] -> [B,H,W,T,C] -> [B*H*W, T*C]`; self-inverse on the
    /// permutation axes.
    fn to_merged(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let s = h.shape().to_vec();
        h.permute(&[0, 3, 4, 1, 2])?.reshape(&[s[0] * s[3] * s[4], s[1] * s[2]])
    }

    fn from_merged(&self, m: &Tensor<T>, like: &[usize]) -> Result<Tensor<T>> {
        m.reshape(&[like[0], like[3], like[4], like[1], like[2]])?.permute(&[0, 3, 4, 1, 2])
    }

    pub fn forward(
        &self,
        h: &Tensor<T>,
        tape: Option<&Tape<T>>,
        steps_override: Option<usize>,
    ) -> Result<Tensor<T>> {
        let s = h.shape().to_vec();
        if s.len() != 5 || s[1] * s[2] != self.merged {
            return Err(Error::ShapeMismatch {
                op: "ttt_block",
                detail: format!("expected merged width {}, got {s:?}", self.merged),
            });
        }
        let eps = T::of(1e-5);
        let ln1 = self
            .to_merged(h)?
            .layer_norm(&self.ln1_gamma.tensor(tape), &self.ln1_beta.tensor(tape), eps)?;
        let adapted = self.ttt.forward_sequence(&self.from_merged(&ln1, &s)?, tape, steps_override)?;
        let x = h.add(&adapted)?;
        let ln2 = self
            .to_merged(&x)?
            .layer_norm(&self.ln2_gamma.tensor(tape), &self.ln2_beta.tensor(tape), eps)?;
        let hidden = self.ff_w1.shape()[1];
        let rows = ln2.shape()[0];
        let ff = ln2
            .matmul(&self.ff_w1.tensor(tape))?
            .reshape(&[rows, hidden, 1])?
            .add_channel(&self.ff_b1.tensor(tape))?
            .reshape(&[rows, hidden])?
            .gelu()
            .matmul(&self.ff_w2.tensor(tape))?
            .reshape(&[rows, self.merged, 1])?
            .add_channel(&self.ff_b2.tensor(tape))?
            .reshape(&[rows, self.merged])?;
        x.add(&self.from_merged(&ff, &s)?)
    }
}
