//! Forecast verification: threshold-based binary-event scores per lead time
//! plus image-quality scores.
//!
//! Binarization is inclusive (value >= tau counts as an event), matching the
//! data filter convention. Confusion counts are pooled over the evaluated
//! sequence set per lead-time slice before rates are computed; degenerate
//! denominators yield an explicit undefined marker that aggregates exclude
//! and record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default verification thresholds in dBZ (light, moderate, heavy).
pub const DEFAULT_THRESHOLDS: [f64; 3] = [10.0, 25.0, 35.0];

/// SSIM dynamic range: the working dBZ span.
pub const SSIM_RANGE: f64 = 70.0;
/// SSIM sliding-window edge length.
pub const SSIM_WINDOW: usize = 8;

/// Pixel-wise binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.correct_negatives += other.correct_negatives;
        self.total += other.total;
    }

    pub fn is_consistent(&self) -> bool {
        self.hits + self.misses + self.false_alarms + self.correct_negatives == self.total
    }
}

/// A verification rate that may be undefined on degenerate counts.
/// Serializes as a JSON number or null.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Score {
    Defined(f64),
    Undefined,
}

impl Score {
    pub fn value(&self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(*v),
            Self::Undefined => None,
        }
    }
}

impl Serialize for Score {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Defined(v) => s.serialize_f64(*v),
            Self::Undefined => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let opt = Option::<f64>::deserialize(d)?;
        Ok(match opt {
            Some(v) => Self::Defined(v),
            None => Self::Undefined,
        })
    }
}

/// Pixel-wise confusion at threshold `tau` (inclusive binarization).
pub fn confusion(prediction: &[f64], truth: &[f64], tau: f64) -> Result<ConfusionCounts> {
    if prediction.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion",
            detail: format!("{} vs {} values", prediction.len(), truth.len()),
        });
    }
    let mut c = ConfusionCounts { total: prediction.len() as u64, ..Default::default() };
    for (&p, &y) in prediction.iter().zip(truth) {
        match (p >= tau, y >= tau) {
            (true, true) => c.hits += 1,
            (true, false) => c.false_alarms += 1,
            (false, true) => c.misses += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

/// Probability of detection: `H / (H + M)`.
pub fn pod(c: &ConfusionCounts) -> Score {
    ratio(c.hits, c.hits + c.misses)
}

/// False alarm ratio: `FA / (H + FA)`.
pub fn far(c: &ConfusionCounts) -> Score {
    ratio(c.false_alarms, c.hits + c.false_alarms)
}

/// Critical success index: `H / (H + M + FA)`.
pub fn csi(c: &ConfusionCounts) -> Score {
    ratio(c.hits, c.hits + c.misses + c.false_alarms)
}

/// Equitable threat score: `(H - R) / (H + M + FA - R)` with the random-hit
/// correction `R = (H + FA)(H + M) / total`.
pub fn ets(c: &ConfusionCounts) -> Score {
    if c.total == 0 {
        return Score::Undefined;
    }
    let h = c.hits as f64;
    let events = (c.hits + c.misses + c.false_alarms) as f64;
    let r = ((c.hits + c.false_alarms) as f64) * ((c.hits + c.misses) as f64) / c.total as f64;
    let denom = events - r;
    if denom == 0.0 {
        return Score::Undefined;
    }
    Score::Defined((h - r) / denom)
}

fn ratio(num: u64, denom: u64) -> Score {
    if denom == 0 {
        Score::Undefined
    } else {
        Score::Defined(num as f64 / denom as f64)
    }
}

/// Mean squared error over two equal-length fields.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            detail: format!("{} vs {} values", a.len(), b.len()),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Structural similarity with uniform 8x8 sliding windows (stride 1) and the
/// standard stabilizers `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` at `L = 70`.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            detail: format!("field {}x{} vs {} / {} values", h, w, a.len(), b.len()),
        });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            detail: format!("{SSIM_WINDOW}x{SSIM_WINDOW} window larger than {h}x{w} image"),
        });
    }
    let c1 = (0.01 * SSIM_RANGE).powi(2);
    let c2 = (0.03 * SSIM_RANGE).powi(2);
    let win = SSIM_WINDOW;
    let area = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=h - win {
        for left in 0..=w - win {
            let mut sa = 0.0;
            let mut sb = 0.0;
            let mut saa = 0.0;
            let mut sbb = 0.0;
            let mut sab = 0.0;
            for dy in 0..win {
                let row = (top + dy) * w + left;
                for dx in 0..win {
                    let x = a[row + dx];
                    let y = b[row + dx];
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let mu_a = sa / area;
            let mu_b = sb / area;
            let var_a = saa / area - mu_a * mu_a;
            let var_b = sbb / area - mu_b * mu_b;
            let cov = sab / area - mu_a * mu_b;
            let score = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += score;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Scores at one threshold for one lead time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ThresholdScores {
    pub tau: f64,
    pub counts: ConfusionCounts,
    pub pod: Score,
    pub far: Score,
    pub csi: Score,
    pub ets: Score,
}

impl ThresholdScores {
    pub fn from_counts(tau: f64, counts: ConfusionCounts) -> Self {
        Self { tau, counts, pod: pod(&counts), far: far(&counts), csi: csi(&counts), ets: ets(&counts) }
    }
}

/// Scores for one lead time.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LeadScores {
    pub lead: usize,
    pub mse: f64,
    pub ssim: f64,
    pub thresholds: Vec<ThresholdScores>,
}

/// Mean of defined cells plus the exclusion count.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub mean: Score,
    pub undefined_excluded: usize,
}

fn aggregate(values: impl Iterator<Item = Score>) -> Aggregate {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for v in values {
        match v {
            Score::Defined(x) => {
                sum += x;
                n += 1;
            }
            Score::Undefined => excluded += 1,
        }
    }
    Aggregate {
        mean: if n == 0 { Score::Undefined } else { Score::Defined(sum / n as f64) },
        undefined_excluded: excluded,
    }
}

/// Aggregate verification scores at one threshold.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ThresholdAggregate {
    pub tau: f64,
    pub pod: Aggregate,
    pub far: Aggregate,
    pub csi: Aggregate,
    pub ets: Aggregate,
}

/// Full verification report: per-lead-time scores, aggregates over defined
/// cells, and the configuration echo. Counts are pooled per lead-time slice
/// over the whole evaluated set before rates are computed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    /// Config fingerprint as fixed-width hex (u64 does not survive JSON
    /// numbers losslessly).
    pub config_fingerprint: String,
    /// Pooling convention note.
    pub convention: String,
    /// Echo of loss/mask settings active when the report was produced.
    pub loss_settings: String,
    pub mode: String,
    pub sequences: usize,
    pub per_lead: Vec<LeadScores>,
    pub mse_mean: f64,
    pub ssim_mean: f64,
    pub by_threshold: Vec<ThresholdAggregate>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metric report: {e}")))
    }

    /// Mean ETS at the given threshold (aggregate over lead times).
    pub fn mean_ets_at(&self, tau: f64) -> Option<f64> {
        self.by_threshold
            .iter()
            .find(|t| t.tau == tau)
            .and_then(|t| t.ets.mean.value())
    }

    /// Mean CSI at the given threshold.
    pub fn mean_csi_at(&self, tau: f64) -> Option<f64> {
        self.by_threshold
            .iter()
            .find(|t| t.tau == tau)
            .and_then(|t| t.csi.mean.value())
    }
}

/// Evaluate denormalized (dBZ) predictions against targets.
///
/// `predictions` and `targets` hold one `[T', H, W]` field per sequence.
pub fn evaluate(
    predictions: &[Vec<f64>],
    targets: &[Vec<f64>],
    leads: usize,
    h: usize,
    w: usize,
    thresholds: &[f64],
    config_fingerprint: u64,
    loss_settings: &str,
    mode: &str,
) -> Result<MetricReport> {
    if predictions.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            detail: format!("{} predictions vs {} targets", predictions.len(), targets.len()),
        });
    }
    let frame = h * w;
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != leads * frame || t.len() != leads * frame {
            return Err(Error::ShapeMismatch {
                op: "evaluate",
                detail: "sequence length mismatch against leads*H*W".into(),
            });
        }
    }
    let mut per_lead = Vec::with_capacity(leads);
    for lead in 0..leads {
        let mut counts: Vec<ConfusionCounts> =
            thresholds.iter().map(|_| ConfusionCounts::default()).collect();
        let mut mse_sum = 0.0;
        let mut ssim_sum = 0.0;
        for (p, t) in predictions.iter().zip(targets) {
            let pf = &p[lead * frame..(lead + 1) * frame];
            let tf = &t[lead * frame..(lead + 1) * frame];
            for (ci, &tau) in thresholds.iter().enumerate() {
                counts[ci].merge(&confusion(pf, tf, tau)?);
            }
            mse_sum += mse(pf, tf)?;
            ssim_sum += ssim(pf, tf, h, w)?;
        }
        let n = predictions.len().max(1) as f64;
        per_lead.push(LeadScores {
            lead,
            mse: mse_sum / n,
            ssim: ssim_sum / n,
            thresholds: thresholds
                .iter()
                .zip(counts)
                .map(|(&tau, c)| ThresholdScores::from_counts(tau, c))
                .collect(),
        });
    }
    let mse_mean = per_lead.iter().map(|l| l.mse).sum::<f64>() / leads.max(1) as f64;
    let ssim_mean = per_lead.iter().map(|l| l.ssim).sum::<f64>() / leads.max(1) as f64;
    let by_threshold = thresholds
        .iter()
        .enumerate()
        .map(|(ci, &tau)| ThresholdAggregate {
            tau,
            pod: aggregate(per_lead.iter().map(|l| l.thresholds[ci].pod)),
            far: aggregate(per_lead.iter().map(|l| l.thresholds[ci].far)),
            csi: aggregate(per_lead.iter().map(|l| l.thresholds[ci].csi)),
            ets: aggregate(per_lead.iter().map(|l| l.thresholds[ci].ets)),
        })
        .collect();
    Ok(MetricReport {
        config_fingerprint: format!("{config_fingerprint:016x}"),
        convention: "confusion counts pooled over sequences per lead-time slice".into(),
        loss_settings: loss_settings.to_string(),
        mode: mode.to_string(),
        sequences: predictions.len(),
        per_lead,
        mse_mean,
        ssim_mean,
        by_threshold,
    })
}
