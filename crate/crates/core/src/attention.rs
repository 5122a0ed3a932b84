//! Task-specific attention operators: the temporal (squeeze-excite style)
//! gate, the motion-difference gate, and their parallel combination used by
//! the skip branch.
//!
//! Both operators are shape-preserving maps on `[B,T,C,H,W]` feature
//! sequences and pure functions of `(input, params)`.

use crate::conv::conv2d;
use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

fn expect_5d<T: Scalar>(op: &'static str, h: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let s = h.shape();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("expected [B,T,C,H,W], got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2], s[3], s[4]))
}

/// Squeeze-and-excitation over merged time-channel descriptors.
///
/// A spatial global average pool produces a `[B, T*C]` descriptor; a
/// bottleneck (reduce, relu, expand, sigmoid) yields a per-(t,c) gate that
/// rescales the input. At zero weights the gate is exactly sigmoid(0) = 0.5.
pub struct TemporalAttention<T: Scalar> {
    /// `[T*C, T*C/r]` bottleneck projection.
    pub reduce: Parameter<T>,
    /// `[T*C/r, T*C]` expansion back to gate width.
    pub expand: Parameter<T>,
    pub reduction: usize,
}

impl<T: Scalar> TemporalAttention<T> {
    /// Validates that `reduction` divides the merged width `t*c`.
    pub fn init(prefix: &str, t: usize, c: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let tc = t * c;
        if reduction == 0 || tc % reduction != 0 {
            return Err(Error::Config(format!(
                "temporal attention: reduction {reduction} does not divide merged width {tc}"
            )));
        }
        let hidden = tc / reduction;
        let scale = (2.0 / (tc + hidden) as f64).sqrt();
        Ok(Self {
            reduce: Parameter::uniform(&format!("{prefix}.reduce"), &[tc, hidden], scale, rng),
            expand: Parameter::uniform(&format!("{prefix}.expand"), &[hidden, tc], scale, rng),
            reduction,
        })
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        vec![self.reduce.clone(), self.expand.clone()]
    }

    pub fn forward(&self, h: &Tensor<T>, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let (b, t, c, hh, ww) = expect_5d("temporal_attention", h)?;
        let tc = t * c;
        if self.reduce.shape()[0] != tc {
            return Err(Error::ShapeMismatch {
                op: "temporal_attention",
                detail: format!("params built for width {}, input has {tc}", self.reduce.shape()[0]),
            });
        }
        let descriptor = h.gap_spatial()?.reshape(&[b, tc])?;
        let gate = descriptor
            .matmul(&self.reduce.tensor(tape))?
            .relu()
            .matmul(&self.expand.tensor(tape))?
            .sigmoid();
        let rows = h.reshape(&[b * tc, hh * ww])?;
        let scaled = rows.row_scale(&gate.reshape(&[b * tc])?)?;
        scaled.reshape(&[b, t, c, hh, ww])
    }
}

/// Motion-difference gating.
///
/// Consecutive-frame differences (first frame gets a zero difference) drive a
/// 3x3 gating convolution; the sigmoid gate modulates the input in residual
/// form `h * (1 + m)`, emphasizing moving structures. Static input with zero
/// bias gives a uniform gate of 0.5.
pub struct MotionAttention<T: Scalar> {
    /// `[C, C, 3, 3]` gating kernels over difference frames.
    pub kernels: Parameter<T>,
    /// `[C]` output gate bias.
    pub bias: Parameter<T>,
}

impl<T: Scalar> MotionAttention<T> {
    pub fn init(prefix: &str, c: usize, rng: &mut Rng) -> Self {
        let scale = (2.0 / (c * 9 + c * 9) as f64).sqrt();
        Self {
            kernels: Parameter::uniform(&format!("{prefix}.kernels"), &[c, c, 3, 3], scale, rng),
            bias: Parameter::zeros(&format!("{prefix}.bias"), &[c]),
        }
    }

    pub fn params(&self) -> Vec<Parameter<T>> {
        vec![self.kernels.clone(), self.bias.clone()]
    }

    pub fn forward(&self, h: &Tensor<T>, tape: Option<&Tape<T>>) -> Result<Tensor<T>> {
        let (b, t, c, hh, ww) = expect_5d("motion_attention", h)?;
        if self.kernels.shape()[1] != c {
            return Err(Error::ShapeMismatch {
                op: "motion_attention",
                detail: format!("kernels expect {} channels, input has {c}", self.kernels.shape()[1]),
            });
        }
        // difference stack d_t = h_t - h_{t-1}, d_0 = 0, built time-major
        let tmajor = h.permute(&[1, 0, 2, 3, 4])?.reshape(&[t, b * c * hh * ww])?;
        let diffs = if t > 1 {
            let lead = tmajor.slice_rows(1, t)?;
            let lag = tmajor.slice_rows(0, t - 1)?;
            let zero = Tensor::zeros(&[1, b * c * hh * ww]);
            zero.concat_rows(&lead.sub(&lag)?)?
        } else {
            Tensor::zeros(&[1, b * c * hh * ww])
        };
        let diffs = diffs
            .reshape(&[t, b, c, hh, ww])?
            .permute(&[1, 0, 2, 3, 4])?
            .reshape(&[b * t, c, hh, ww])?;
        let gate = conv2d(&diffs, &self.kernels.tensor(tape), 1, 1)?
            .reshape(&[b * t, c, hh * ww])?
            .add_channel(&self.bias.tensor(tape))?
            .sigmoid();
        let one_plus = gate.add_scalar(T::one()).reshape(&[b, t, c, hh, ww])?;
        h.mul(&one_plus)
    }
}

/// Parallel combination used on the skip path: the unweighted mean of the
/// motion-gated and temporally-gated views of the same features.
pub fn skip_branch<T: Scalar>(
    h_low: &Tensor<T>,
    motion: &MotionAttention<T>,
    temporal: &TemporalAttention<T>,
    tape: Option<&Tape<T>>,
) -> Result<Tensor<T>> {
    let m = motion.forward(h_low, tape)?;
    let t = temporal.forward(h_low, tape)?;
    Ok(m.add(&t)?.scale(T::of(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn neutral_ta(t: usize, c: usize) -> TemporalAttention<f64> {
        let mut rng = Rng::new(0);
        let ta = TemporalAttention::init("ta", t, c, 2, &mut rng).unwrap();
        ta.reduce.set_values(&vec![0.0; ta.reduce.len()]);
        ta.expand.set_values(&vec![0.0; ta.expand.len()]);
        ta
    }

    fn rand_input(b: usize, t: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let data = (0..b * t * c * h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::from_vec(&[b, t, c, h, w], data).unwrap()
    }

    #[test]
    fn zero_weights_halve_the_input() {
        let h = rand_input(2, 2, 2, 3, 3, 4);
        let ta = neutral_ta(2, 2);
        let out = ta.forward(&h, None).unwrap();
        for (o, i) in out.data().iter().zip(h.data()) {
            assert!((o - i / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reduction_must_divide_merged_width() {
        let mut rng = Rng::new(1);
        assert!(TemporalAttention::<f64>::init("ta", 3, 3, 4, &mut rng).is_err());
        assert!(TemporalAttention::<f64>::init("ta", 2, 4, 4, &mut rng).is_ok());
    }

    #[test]
    fn gates_bound_output_magnitude() {
        let mut rng = Rng::new(9);
        let ta = TemporalAttention::init("ta", 2, 2, 2, &mut rng).unwrap();
        let me = MotionAttention::init("me", 2, &mut rng);
        let h = rand_input(1, 2, 2, 4, 4, 10);
        let out_ta = ta.forward(&h, None).unwrap();
        for (o, i) in out_ta.data().iter().zip(h.data()) {
            assert!(o.abs() <= i.abs() + 1e-12, "temporal gate amplified: {o} vs {i}");
        }
        let out_me = me.forward(&h, None).unwrap();
        for (o, i) in out_me.data().iter().zip(h.data()) {
            assert!(o.abs() <= 2.0 * i.abs() + 1e-12, "motion gate beyond 2x: {o} vs {i}");
        }
    }

    #[test]
    fn single_frame_motion_uses_bias_only_gate() {
        let mut rng = Rng::new(3);
        let me = MotionAttention::init("me", 2, &mut rng);
        let h = rand_input(1, 1, 2, 4, 4, 11);
        let out = me.forward(&h, None).unwrap();
        // zero differences + zero bias -> gate 0.5 -> output 1.5 * h
        for (o, i) in out.data().iter().zip(h.data()) {
            assert!((o - 1.5 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_frames_match_single_frame_case() {
        let mut rng = Rng::new(5);
        let me = MotionAttention::init("me", 2, &mut rng);
        let one = rand_input(1, 1, 2, 4, 4, 12);
        let mut rep = one.data().to_vec();
        rep.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[1, 2, 2, 4, 4], rep).unwrap();
        let out = me.forward(&two, None).unwrap();
        let single = me.forward(&one, None).unwrap();
        for t in 0..2 {
            let frame = &out.data()[t * 32..(t + 1) * 32];
            for (o, s) in frame.iter().zip(single.data()) {
                assert!((o - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn skip_branch_matches_hand_composition_at_neutral_points() {
        // temporal at zero weights -> h/2; motion with zero kernels and bias
        // on any input -> 1.5*h; parallel mean -> h.
        let mut rng = Rng::new(6);
        let me = MotionAttention::init("me", 2, &mut rng);
        me.kernels.set_values(&vec![0.0; me.kernels.len()]);
        let ta = neutral_ta(2, 2);
        let h = rand_input(1, 2, 2, 3, 3, 13);
        let out = skip_branch(&h, &me, &ta, None).unwrap();
        for (o, i) in out.data().iter().zip(h.data()) {
            assert!((o - i).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_preserved_for_random_dims() {
        let mut rng = Rng::new(7);
        for _ in 0..6 {
            let (b, t, c, hh, ww) = (
                rng.range_usize(1, 3),
                rng.range_usize(1, 4),
                rng.range_usize(1, 3),
                rng.range_usize(2, 5),
                rng.range_usize(2, 5),
            );
            let ta = TemporalAttention::init("ta", t, c, 1, &mut rng).unwrap();
            let me = MotionAttention::init("me", c, &mut rng);
            let h = rand_input(b, t, c, hh, ww, 100 + b as u64);
            assert_eq!(ta.forward(&h, None).unwrap().shape(), h.shape());
            assert_eq!(me.forward(&h, None).unwrap().shape(), h.shape());
            assert_eq!(skip_branch(&h, &me, &ta, None).unwrap().shape(), h.shape());
        }
    }

    #[test]
    fn batch_permutation_commutes() {
        let mut rng = Rng::new(8);
        let ta = TemporalAttention::init("ta", 2, 2, 2, &mut rng).unwrap();
        let me = MotionAttention::init("me", 2, &mut rng);
        let a = rand_input(1, 2, 2, 3, 3, 20);
        let b = rand_input(1, 2, 2, 3, 3, 21);
        let mut ab = a.data().to_vec();
        ab.extend_from_slice(b.data());
        let mut ba = b.data().to_vec();
        ba.extend_from_slice(a.data());
        let ab = Tensor::from_vec(&[2, 2, 2, 3, 3], ab).unwrap();
        let ba = Tensor::from_vec(&[2, 2, 2, 3, 3], ba).unwrap();
        for op in [0usize, 1] {
            let (out_ab, out_ba) = if op == 0 {
                (ta.forward(&ab, None).unwrap(), ta.forward(&ba, None).unwrap())
            } else {
                (me.forward(&ab, None).unwrap(), me.forward(&ba, None).unwrap())
            };
            let half = out_ab.len() / 2;
            assert_eq!(&out_ab.data()[..half], &out_ba.data()[half..], "op {op}");
            assert_eq!(&out_ab.data()[half..], &out_ba.data()[..half], "op {op}");
        }
    }

    #[test]
    fn temporal_attention_gradients() {
        for seed in 0..5u64 {
            let mut rng = Rng::new(40 + seed);
            let ta = TemporalAttention::<f64>::init("ta", 2, 2, 2, &mut rng).unwrap();
            let x = Parameter::uniform("x", &[1, 2, 2, 4, 4], 1.0, &mut rng);
            let mut params = ta.params();
            params.push(x.clone());
            check_gradients(
                &params,
                |tape| {
                    let h = x.tensor(Some(tape));
                    let out = ta.forward(&h, Some(tape)).unwrap();
                    out.mul(&out).unwrap().sum_all()
                },
                1e-5,
                1e-5,
            )
            .unwrap();
        }
    }

    #[test]
    fn motion_attention_gradients() {
        for seed in 0..5u64 {
            let mut rng = Rng::new(60 + seed);
            let me = MotionAttention::<f64>::init("me", 2, &mut rng);
            let x = Parameter::uniform("x", &[1, 3, 2, 3, 3], 1.0, &mut rng);
            let mut params = me.params();
            params.push(x.clone());
            check_gradients(
                &params,
                |tape| {
                    let h = x.tensor(Some(tape));
                    let out = me.forward(&h, Some(tape)).unwrap();
                    out.mul(&out).unwrap().sum_all()
                },
                1e-5,
                1e-5,
            )
            .unwrap();
        }
    }

    #[test]
    fn skip_branch_gradients() {
        for seed in 0..3u64 {
            let mut rng = Rng::new(80 + seed);
            let ta = TemporalAttention::<f64>::init("ta", 2, 2, 1, &mut rng).unwrap();
            let me = MotionAttention::init("me", 2, &mut rng);
            let x = Parameter::uniform("x", &[1, 2, 2, 3, 3], 1.0, &mut rng);
            let mut params = ta.params();
            params.extend(me.params());
            params.push(x.clone());
            check_gradients(
                &params,
                |tape| {
                    let h = x.tensor(Some(tape));
                    let out = skip_branch(&h, &me, &ta, Some(tape)).unwrap();
                    out.mul(&out).unwrap().sum_all()
                },
                1e-5,
                1e-5,
            )
            .unwrap();
        }
    }
}
