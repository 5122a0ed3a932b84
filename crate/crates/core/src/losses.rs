//! The composite training objective: intensity-weighted absolute error plus
//! an amplitude-constrained high-frequency spectral loss.
//!
//! Predictions and targets are in the normalized unit range; the MAE weight
//! law reads the denormalized target intensity. The spectral focal
//! coefficient is recomputed at every evaluation from the current prediction
//! but is excluded from the gradient path: gradient flows through the squared
//! spectral difference only.

use crate::data::MAX_DBZ;
use crate::error::{Error, Result};
use crate::fft::{dft2, dft2_raw};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// High-frequency mask selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Keep bins whose shifted radial frequency exceeds the cutoff OR whose
    /// target magnitude exceeds the median target magnitude (default).
    RadialOrMagnitude,
    /// Radial-frequency criterion only.
    Radial,
    /// Target-magnitude criterion only.
    Magnitude,
    /// No masking.
    AllPass,
}

impl MaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "or" | "radial_or_magnitude" => Ok(Self::RadialOrMagnitude),
            "radial" => Ok(Self::Radial),
            "magnitude" => Ok(Self::Magnitude),
            "allpass" | "all_pass" => Ok(Self::AllPass),
            other => Err(Error::Config(format!("unknown mask kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::RadialOrMagnitude => "radial_or_magnitude",
            Self::Radial => "radial",
            Self::Magnitude => "magnitude",
            Self::AllPass => "allpass",
        }
    }
}

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Focal exponent on the spectral difference magnitude.
    pub alpha: f64,
    /// Weight of the spectral term in the composite loss.
    pub lambda: f64,
    /// MAE weight law divisor: w = 10^(dBZ / divisor).
    pub mae_divisor: f64,
    /// MAE weight cap.
    pub mae_cap: f64,
    pub mask: MaskKind,
    /// Radial cutoff as a fraction of Nyquist.
    pub radial_cutoff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 0.1,
            mae_divisor: 16.0,
            mae_cap: 30.0,
            mask: MaskKind::RadialOrMagnitude,
            radial_cutoff: 0.125,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("alpha and lambda must be non-negative".into()));
        }
        if self.mae_cap < 1.0 {
            return Err(Error::Config("mae_cap must be >= 1".into()));
        }
        if self.mae_divisor <= 0.0 {
            return Err(Error::Config("mae_divisor must be positive".into()));
        }
        Ok(())
    }

    /// One-line echo of the spectral settings for reports.
    pub fn settings_echo(&self) -> String {
        format!(
            "alpha={} lambda={} mae=10^(dBZ/{})cap{} mask={} radial_cutoff={}",
            self.alpha, self.lambda, self.mae_divisor, self.mae_cap, self.mask.name(), self.radial_cutoff
        )
    }
}

/// Intensity weight for one ground-truth dBZ value:
/// `min(10^(y/divisor), cap)`, monotone non-decreasing in `y`.
pub fn mae_weight(y_dbz: f64, cfg: &LossConfig) -> Result<f64> {
    if !(0.0..=MAX_DBZ).contains(&y_dbz) {
        return Err(Error::Format(format!("mae_weight: {y_dbz} dBZ outside [0, {MAX_DBZ}]")));
    }
    Ok(10f64.powf(y_dbz / cfg.mae_divisor).min(cfg.mae_cap))
}

/// Weighted mean absolute error over a `[B,T,1,H,W]` pair in the normalized
/// range: per lead time, the weighted absolute error is averaged over batch
/// and pixels; lead-time terms are summed. Weights come from the
/// denormalized ground truth and do not carry gradient.
pub fn weighted_mae<T: Scalar>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let s = prediction.shape();
    if s != target.shape() || s.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "weighted_mae",
            detail: format!("{:?} vs {:?}", s, target.shape()),
        });
    }
    let (b, _t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let weights: Vec<T> = target
        .data()
        .iter()
        .map(|&y| {
            let dbz = y.to_f64_lossy() * MAX_DBZ;
            mae_weight(dbz.clamp(0.0, MAX_DBZ), cfg).map(T::of)
        })
        .collect::<Result<_>>()?;
    let weights = Tensor::from_parts(s.to_vec(), std::rc::Rc::new(weights));
    // summing over leads while averaging batch and pixels equals a global
    // sum scaled by 1/(B*C*H*W)
    let scale = T::one() / T::of((b * c * h * w) as f64);
    Ok(prediction
        .sub(target)?
        .abs()
        .mul(&weights)?
        .sum_all()
        .scale(scale))
}

/// Spectral mask and focal-amplitude coefficient for one frame, computed
/// eagerly from the current prediction and target spectra. The returned
/// buffer includes the 1/(H*W) normalization.
pub fn hffl_coefficient<T: Scalar>(
    pred_re: &[T],
    pred_im: &[T],
    tgt_re: &[T],
    tgt_im: &[T],
    h: usize,
    w: usize,
    cfg: &LossConfig,
) -> Vec<T> {
    let n = h * w;
    let mut tgt_mag = vec![0.0f64; n];
    let mut max_mag = 0.0f64;
    for i in 0..n {
        let m = (tgt_re[i].to_f64_lossy().powi(2) + tgt_im[i].to_f64_lossy().powi(2)).sqrt();
        tgt_mag[i] = m;
        max_mag = max_mag.max(m);
    }
    // degenerate all-zero target spectrum: amplitude ratio defined as 0
    if max_mag == 0.0 {
        return vec![T::zero(); n];
    }
    let median = {
        let mut sorted = tgt_mag.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted[n / 2]
    };
    let inv_hw = 1.0 / n as f64;
    let mut coeff = vec![T::zero(); n];
    for u in 0..h {
        for v in 0..w {
            let i = u * w + v;
            let keep = match cfg.mask {
                MaskKind::AllPass => true,
                MaskKind::Radial => radial_exceeds(u, v, h, w, cfg.radial_cutoff),
                MaskKind::Magnitude => tgt_mag[i] > median,
                MaskKind::RadialOrMagnitude => {
                    radial_exceeds(u, v, h, w, cfg.radial_cutoff) || tgt_mag[i] > median
                }
            };
            if !keep {
                continue;
            }
            let dre = pred_re[i].to_f64_lossy() - tgt_re[i].to_f64_lossy();
            let dim = pred_im[i].to_f64_lossy() - tgt_im[i].to_f64_lossy();
            let diff_mag = (dre * dre + dim * dim).sqrt();
            let focal = if cfg.alpha == 0.0 { 1.0 } else { diff_mag.powf(cfg.alpha) };
            let amplitude = tgt_mag[i] / max_mag;
            coeff[i] = T::of(focal * amplitude * inv_hw);
        }
    }
    coeff
}

/// Shifted radial frequency (fraction of Nyquist) strictly above the cutoff.
fn radial_exceeds(u: usize, v: usize, h: usize, w: usize, cutoff: f64) -> bool {
    let ru = shifted_fraction(u, h);
    let rv = shifted_fraction(v, w);
    (ru * ru + rv * rv).sqrt() > cutoff
}

/// Distance of bin `u` from DC in shifted coordinates, as a fraction of the
/// Nyquist frequency along that axis.
fn shifted_fraction(u: usize, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let half = n / 2;
    let dist = u.min(n - u); // wrap-around distance to the DC bin
    dist as f64 / half as f64
}

/// Amplitude-constrained focal frequency loss for one `[H,W]` frame pair in
/// the normalized range. The coefficient (mask, focal, amplitude terms and
/// the 1/(H*W) factor) is held fixed; gradient flows through the squared
/// spectral difference only.
pub fn hffl<T: Scalar>(prediction: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let s = prediction.shape();
    if s != target.shape() || s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "hffl",
            detail: format!("{:?} vs {:?}", s, target.shape()),
        });
    }
    let (h, w) = (s[0], s[1]);
    let pred_spec = dft2(prediction)?;
    let (tgt_re, tgt_im) = dft2_raw(target.data(), h, w);
    let n = h * w;
    let (pred_re, pred_im) = pred_spec.data().split_at(n);
    let coeff = hffl_coefficient(pred_re, pred_im, &tgt_re, &tgt_im, h, w, cfg);
    hffl_given_coeff(&pred_spec, &tgt_re, &tgt_im, &coeff)
}

/// Spectral loss with an explicitly fixed coefficient buffer; the gradient
/// contract of [`hffl`] is exactly this function at the current coefficient.
pub fn hffl_given_coeff<T: Scalar>(
    pred_spec: &Tensor<T>,
    tgt_re: &[T],
    tgt_im: &[T],
    coeff: &[T],
) -> Result<Tensor<T>> {
    let s = pred_spec.shape();
    let n = s[1] * s[2];
    let mut tgt = tgt_re.to_vec();
    tgt.extend_from_slice(tgt_im);
    let tgt = Tensor::from_parts(s.to_vec(), std::rc::Rc::new(tgt));
    let diff = pred_spec.sub(&tgt)?;
    let sq = diff.mul(&diff)?;
    let re = sq.reshape(&[2, n])?.slice_rows(0, 1)?;
    let im = sq.reshape(&[2, n])?.slice_rows(1, 2)?;
    let power = re.add(&im)?;
    let coeff = Tensor::from_parts(vec![1, n], std::rc::Rc::new(coeff.to_vec()));
    Ok(power.mul(&coeff)?.sum_all())
}

/// `weighted_mae + lambda * (per-frame hffl summed over lead times, averaged
/// over the batch)`. With `lambda == 0` the spectral term is skipped
/// entirely, so the result is bit-identical to [`weighted_mae`].
pub fn composite_loss<T: Scalar>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    let mae = weighted_mae(prediction, target, cfg)?;
    if cfg.lambda == 0.0 {
        return Ok(mae);
    }
    let s = prediction.shape().to_vec();
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    debug_assert_eq!(c, 1);
    let pred_frames = prediction.reshape(&[b * t, h * w])?;
    let tgt_frames = target.reshape(&[b * t, h * w])?;
    let mut spectral: Option<Tensor<T>> = None;
    for i in 0..b * t {
        let p = pred_frames.slice_rows(i, i + 1)?.reshape(&[h, w])?;
        let y = tgt_frames.slice_rows(i, i + 1)?.reshape(&[h, w])?.detach();
        let term = hffl(&p, &y, cfg)?;
        spectral = Some(match spectral {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let spectral = spectral.expect("at least one frame").scale(T::one() / T::of(b as f64));
    mae.add(&spectral.scale(T::of(cfg.lambda)))
}
