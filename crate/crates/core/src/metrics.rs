//! Evaluation measures for valence/arousal estimates.
//!
//! All correlation statistics use population (1/N) moments; the CCC here is
//! also the one the training losses use.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::DimensionalLabel;
use crate::error::{Error, Result};

fn check_lengths(y: &[f64], yhat: &[f64], min: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: yhat.len(),
        });
    }
    if y.len() < min {
        return Err(Error::Degenerate(format!(
            "need at least {min} values, got {}",
            y.len()
        )));
    }
    Ok(())
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

/// Population moments of a pair of series.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Moments {
    pub mean_y: f64,
    pub mean_yhat: f64,
    pub var_y: f64,
    pub var_yhat: f64,
    pub cov: f64,
}

pub(crate) fn moments(y: &[f64], yhat: &[f64]) -> Moments {
    let n = y.len() as f64;
    let mean_y = mean(y);
    let mean_yhat = mean(yhat);
    let (mut var_y, mut var_yhat, mut cov) = (0.0, 0.0, 0.0);
    for (&a, &b) in y.iter().zip(yhat) {
        let (da, db) = (a - mean_y, b - mean_yhat);
        var_y += da * da;
        var_yhat += db * db;
        cov += da * db;
    }
    Moments {
        mean_y,
        mean_yhat,
        var_y: var_y / n,
        var_yhat: var_yhat / n,
        cov: cov / n,
    }
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 1)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    mse(y, yhat).map(f64::sqrt)
}

/// Pearson correlation. Undefined (an error) when either series is constant.
pub fn pcc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 2)?;
    if is_constant(y) || is_constant(yhat) {
        return Err(Error::Degenerate("PCC of a constant series".into()));
    }
    let m = moments(y, yhat);
    Ok((m.cov / (m.var_y.sqrt() * m.var_yhat.sqrt())).clamp(-1.0, 1.0))
}

/// Concordance correlation coefficient.
///
/// `2 cov / (var_y + var_yhat + (mean_y - mean_yhat)^2)`, which equals
/// `2 sd_y sd_yhat pcc / (...)`. Exactly one constant series yields 0 (the
/// limit of the numerator); two constant series are an error.
pub fn ccc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 2)?;
    match (is_constant(y), is_constant(yhat)) {
        (true, true) => return Err(Error::Degenerate("CCC of two constant series".into())),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let m = moments(y, yhat);
    let gap = m.mean_y - m.mean_yhat;
    Ok((2.0 * m.cov / (m.var_y + m.var_yhat + gap * gap)).clamp(-1.0, 1.0))
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Fraction of positions where the signs agree; zero is its own sign.
pub fn sagr(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat, 1)?;
    let agree = y.iter().zip(yhat).filter(|(a, b)| sign(**a) == sign(**b)).count();
    Ok(agree as f64 / y.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 * sum_{k>=1} (-1)^(k-1) exp(-2 k^2 x^2)`, truncated once a term
/// drops below 1e-12.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut k = 1.0f64;
    loop {
        let term = (-2.0 * k * k * x * x).exp();
        if term < 1e-12 {
            break;
        }
        sum += if (k as u64) % 2 == 1 { term } else { -term };
        k += 1.0;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn sorted_copy(x: &[f64]) -> Result<Vec<f64>> {
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in KS sample".into()));
    }
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(v)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value
/// `Q(sqrt(n m / (n + m)) * D)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Degenerate("KS test on an empty sample".into()));
    }
    let xs = sorted_copy(a)?;
    let ys = sorted_copy(b)?;
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut statistic: f64 = 0.0;
    while i < n && j < m {
        let current = xs[i].min(ys[j]);
        while i < n && xs[i] <= current {
            i += 1;
        }
        while j < m && ys[j] <= current {
            j += 1;
        }
        let diff = (i as f64 / n as f64 - j as f64 / m as f64).abs();
        statistic = statistic.max(diff);
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_sf(en * statistic),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionMetrics {
    pub rmse: f64,
    pub pcc: f64,
    pub ccc: f64,
    pub sagr: f64,
}

impl DimensionMetrics {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        Ok(Self {
            rmse: rmse(y, yhat)?,
            pcc: pcc(y, yhat)?,
            ccc: ccc(y, yhat)?,
            sagr: sagr(y, yhat)?,
        })
    }

    fn mean_of(items: &[DimensionMetrics]) -> Self {
        let n = items.len() as f64;
        let sum = |f: fn(&DimensionMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self {
            rmse: sum(|m| m.rmse),
            pcc: sum(|m| m.pcc),
            ccc: sum(|m| m.ccc),
            sagr: sum(|m| m.sagr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub valence: KsResult,
    pub arousal: KsResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub valence: DimensionMetrics,
    pub arousal: DimensionMetrics,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<KsReport>,
}

impl MetricReport {
    /// Field-wise arithmetic mean; `n` is the total over the reports and `ks` is dropped.
    pub fn mean(reports: &[MetricReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::InvalidArgument("mean of zero reports".into()));
        }
        let vals: Vec<_> = reports.iter().map(|r| r.valence).collect();
        let aros: Vec<_> = reports.iter().map(|r| r.arousal).collect();
        Ok(Self {
            valence: DimensionMetrics::mean_of(&vals),
            arousal: DimensionMetrics::mean_of(&aros),
            n: reports.iter().map(|r| r.n).sum(),
            ks: None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Identifies a frame (or a still image, with an empty video id).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video_id: String,
    pub index: u32,
}

impl FrameKey {
    pub fn new(video_id: impl Into<String>, index: u32) -> Self {
        Self {
            video_id: video_id.into(),
            index,
        }
    }
}

pub type LabelledFrame = (FrameKey, DimensionalLabel);

fn aligned(truth: &[LabelledFrame], other: &[LabelledFrame], what: &str) -> Result<Vec<DimensionalLabel>> {
    if truth.len() != other.len() {
        return Err(Error::InvalidArgument(format!(
            "{what}: {} frames vs {} labelled frames",
            other.len(),
            truth.len()
        )));
    }
    let lookup: HashMap<&FrameKey, DimensionalLabel> = other.iter().map(|(k, l)| (k, *l)).collect();
    truth
        .iter()
        .map(|(k, _)| {
            lookup.get(k).copied().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "{what}: no entry for frame {} of video {:?}",
                    k.index, k.video_id
                ))
            })
        })
        .collect()
}

/// Pools all frames and computes the four metrics per dimension. With a
/// baseline, `ks` compares the per-frame absolute-error series of the
/// predictions against those of the baseline.
pub fn evaluate(
    truth: &[LabelledFrame],
    predictions: &[LabelledFrame],
    baseline: Option<&[LabelledFrame]>,
) -> Result<MetricReport> {
    let pred = aligned(truth, predictions, "predictions")?;
    let tv: Vec<f64> = truth.iter().map(|(_, l)| l.valence).collect();
    let ta: Vec<f64> = truth.iter().map(|(_, l)| l.arousal).collect();
    let pv: Vec<f64> = pred.iter().map(|l| l.valence).collect();
    let pa: Vec<f64> = pred.iter().map(|l| l.arousal).collect();
    let ks = match baseline {
        None => None,
        Some(base) => {
            let base = aligned(truth, base, "baseline")?;
            let abs_err = |t: &[f64], p: &mut dyn Iterator<Item = f64>| -> Vec<f64> {
                t.iter().zip(p).map(|(a, b)| (a - b).abs()).collect()
            };
            let ev = abs_err(&tv, &mut pv.iter().copied());
            let ea = abs_err(&ta, &mut pa.iter().copied());
            let bv = abs_err(&tv, &mut base.iter().map(|l| l.valence));
            let ba = abs_err(&ta, &mut base.iter().map(|l| l.arousal));
            Some(KsReport {
                valence: ks_two_sample(&ev, &bv)?,
                arousal: ks_two_sample(&ea, &ba)?,
            })
        }
    };
    Ok(MetricReport {
        valence: DimensionMetrics::compute(&tv, &pv)?,
        arousal: DimensionMetrics::compute(&ta, &pa)?,
        n: truth.len(),
        ks,
    })
}
