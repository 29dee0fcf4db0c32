//! Training objectives and their analytic gradients.
//!
//! Every `*_grad` function returns the loss value together with the gradient
//! with respect to the prediction-side inputs, so the network tape can chain
//! them without re-deriving anything.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, is_constant, moments};

pub const DEFAULT_MARGIN: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ContrastiveRaw", into = "ContrastiveRaw")]
pub struct ContrastiveConfig {
    margin: f64,
}

#[derive(Serialize, Deserialize)]
struct ContrastiveRaw {
    margin: f64,
}

impl TryFrom<ContrastiveRaw> for ContrastiveConfig {
    type Error = Error;
    fn try_from(raw: ContrastiveRaw) -> Result<Self> {
        Self::new(raw.margin)
    }
}

impl From<ContrastiveConfig> for ContrastiveRaw {
    fn from(c: ContrastiveConfig) -> Self {
        Self { margin: c.margin }
    }
}

impl ContrastiveConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if !(margin > 0.0 && margin < 1.0) {
            return Err(Error::InvalidArgument(format!("margin {margin} outside (0, 1)")));
        }
        Ok(Self { margin })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { margin: DEFAULT_MARGIN }
    }
}

/// `f = alpha (i/n)^k`, `g = 1 - (i/n)^k` over `n` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRaw", into = "ScheduleRaw")]
pub struct DynamicWeightSchedule {
    alpha: f64,
    k: u32,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRaw {
    alpha: f64,
    k: u32,
    n: usize,
}

impl TryFrom<ScheduleRaw> for DynamicWeightSchedule {
    type Error = Error;
    fn try_from(r: ScheduleRaw) -> Result<Self> {
        Self::new(r.alpha, r.k, r.n)
    }
}

impl From<DynamicWeightSchedule> for ScheduleRaw {
    fn from(s: DynamicWeightSchedule) -> Self {
        Self { alpha: s.alpha, k: s.k, n: s.n }
    }
}

impl DynamicWeightSchedule {
    /// The (k, alpha) sweep grid.
    pub const K_GRID: [u32; 3] = [1, 2, 3];
    pub const ALPHA_GRID: [f64; 3] = [1.0, 2.0, 20.0];

    pub fn new(alpha: f64, k: u32, n: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || k == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "dynamic weights need alpha > 0, k >= 1, n >= 1 (got {alpha}, {k}, {n})"
            )));
        }
        Ok(Self { alpha, k, n })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn epochs(&self) -> usize {
        self.n
    }

    pub fn with_epochs(self, n: usize) -> Result<Self> {
        Self::new(self.alpha, self.k, n)
    }
}

pub fn dynamic_weights(epoch: usize, sched: &DynamicWeightSchedule) -> Result<(f64, f64)> {
    if epoch > sched.n {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} beyond schedule length {}",
            sched.n
        )));
    }
    let p = (epoch as f64 / sched.n as f64).powi(sched.k as i32);
    Ok((sched.alpha * p, 1.0 - p))
}

/// Shake-shake coefficients for the four MT-CLAR loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShakeShakeDraw {
    lambdas: [f64; 4],
}

impl ShakeShakeDraw {
    pub fn new(lambdas: [f64; 4]) -> Result<Self> {
        if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::InvalidArgument(format!("lambdas {lambdas:?} outside [0, 1]")));
        }
        Ok(Self { lambdas })
    }

    pub fn ones() -> Self {
        Self { lambdas: [1.0; 4] }
    }

    pub fn lambdas(&self) -> [f64; 4] {
        self.lambdas
    }
}

/// Seeded generator of independent U[0,1] draws, one set per training iteration.
#[derive(Clone, Debug)]
pub struct ShakeShake {
    rng: ChaCha8Rng,
}

impl ShakeShake {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn draw(&mut self) -> ShakeShakeDraw {
        let mut lambdas = [0.0; 4];
        for l in &mut lambdas {
            *l = self.rng.random::<f64>();
        }
        ShakeShakeDraw { lambdas }
    }
}

/// `lambda1 l_cont + lambda2 l_ce + lambda3 l_dv + lambda4 l_da`.
pub fn cumulative_loss(l_cont: f64, l_ce: f64, l_dv: f64, l_da: f64, draw: &ShakeShakeDraw) -> Result<f64> {
    let parts = [l_cont, l_ce, l_dv, l_da];
    if let Some(bad) = parts.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite loss term {bad}")));
    }
    Ok(parts.iter().zip(draw.lambdas).map(|(l, w)| l * w).sum())
}

fn check_batch(r1: &ArrayView2<f64>, r2: &ArrayView2<f64>, n_labels: usize) -> Result<()> {
    if r1.dim() != r2.dim() {
        return Err(Error::Shape {
            expected: format!("{:?}", r1.dim()),
            actual: format!("{:?}", r2.dim()),
        });
    }
    if r1.nrows() != n_labels {
        return Err(Error::LengthMismatch {
            left: r1.nrows(),
            right: n_labels,
        });
    }
    if n_labels == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    Ok(())
}

/// Cosine similarity of each row pair, with the norms.
fn row_cosines(r1: &ArrayView2<f64>, r2: &ArrayView2<f64>) -> Result<Vec<(f64, f64, f64)>> {
    r1.outer_iter()
        .zip(r2.outer_iter())
        .enumerate()
        .map(|(i, (a, b))| {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate(format!("zero-norm embedding in row {i}")));
            }
            Ok((a.dot(&b) / (na * nb), na, nb))
        })
        .collect()
}

/// Mean over the batch of `y (1 - d) + (1 - y) max(0, d - m)`.
///
/// `d` is the cosine *similarity* of the two embeddings. Read as a distance,
/// the same expression would pull dissimilar pairs together and push similar
/// pairs apart; only the similarity reading attracts similar pairs and repels
/// dissimilar ones beyond the margin.
pub fn contrastive_loss(
    r1: ArrayView2<f64>,
    r2: ArrayView2<f64>,
    similar: &[bool],
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    check_batch(&r1, &r2, similar.len())?;
    let cos = row_cosines(&r1, &r2)?;
    let total: f64 = cos
        .iter()
        .zip(similar)
        .map(|(&(d, _, _), &y)| if y { 1.0 - d } else { (d - cfg.margin).max(0.0) })
        .sum();
    Ok(total / similar.len() as f64)
}

pub fn contrastive_loss_grad(
    r1: ArrayView2<f64>,
    r2: ArrayView2<f64>,
    similar: &[bool],
    cfg: &ContrastiveConfig,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let loss = contrastive_loss(r1, r2, similar, cfg)?;
    let cos = row_cosines(&r1, &r2)?;
    let n = similar.len() as f64;
    let mut g1 = Array2::zeros(r1.dim());
    let mut g2 = Array2::zeros(r2.dim());
    for (i, (&(d, na, nb), &y)) in cos.iter().zip(similar).enumerate() {
        // dL/dd for this term
        let coef = if y {
            -1.0
        } else if d > cfg.margin {
            1.0
        } else {
            0.0
        } / n;
        if coef == 0.0 {
            continue;
        }
        let (a, b) = (r1.row(i), r2.row(i));
        // dd/da = b / (|a||b|) - d a / |a|^2
        let ga = (&b / (na * nb) - &a * (d / (na * na))) * coef;
        let gb = (&a / (na * nb) - &b * (d / (nb * nb))) * coef;
        g1.row_mut(i).assign(&ga);
        g2.row_mut(i).assign(&gb);
    }
    Ok((loss, g1, g2))
}

/// Mean softmax cross-entropy of `logits` (batch x classes) against class indices.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    cross_entropy_grad(logits, labels).map(|(l, _)| l)
}

pub fn cross_entropy_grad(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() {
        return Err(Error::LengthMismatch {
            left: logits.nrows(),
            right: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        if label >= row.len() {
            return Err(Error::InvalidArgument(format!(
                "class {label} out of range for {} logits",
                row.len()
            )));
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + max - row[label];
        for (j, e) in exps.iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            grad[[i, j]] = (e / z - target) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Shared CCC; see [`metrics::ccc`].
pub fn ccc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    metrics::ccc(y, yhat)
}

/// CCC and its gradient with respect to the predictions.
pub fn ccc_grad(target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = metrics::ccc(target, pred)?;
    let n = pred.len() as f64;
    if is_constant(target) {
        // CCC is identically zero while the target is constant.
        return Ok((value, vec![0.0; pred.len()]));
    }
    let m = moments(target, pred);
    let gap = m.mean_y - m.mean_yhat;
    let denom = m.var_y + m.var_yhat + gap * gap;
    let num = 2.0 * m.cov;
    let grad = target
        .iter()
        .zip(pred)
        .map(|(&t, &p)| {
            let dnum = 2.0 * (t - m.mean_y) / n;
            let dden = 2.0 * (p - m.mean_yhat) / n - 2.0 * gap / n;
            (dnum * denom - num * dden) / (denom * denom)
        })
        .collect();
    Ok((value, grad))
}

pub fn mse_grad(target: &[f64], pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = metrics::mse(target, pred)?;
    let n = pred.len() as f64;
    Ok((value, pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect()))
}

/// `f MSE(pred, target) + g (1 - CCC(pred, target))` at the given epoch.
pub fn delta_loss(pred: &[f64], target: &[f64], epoch: usize, sched: &DynamicWeightSchedule) -> Result<f64> {
    delta_loss_grad(pred, target, epoch, sched).map(|(l, _)| l)
}

pub fn delta_loss_grad(
    pred: &[f64],
    target: &[f64],
    epoch: usize,
    sched: &DynamicWeightSchedule,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() < 2 {
        return Err(Error::Degenerate("delta loss needs at least 2 values".into()));
    }
    let (f, g) = dynamic_weights(epoch, sched)?;
    let (mse, dmse) = mse_grad(target, pred)?;
    let (c, dc) = ccc_grad(target, pred)?;
    let grad = dmse.iter().zip(&dc).map(|(a, b)| f * a - g * b).collect();
    Ok((f * mse + g * (1.0 - c), grad))
}

/// `f (MSE_v + MSE_a) + g (1 - (CCC_v + CCC_a) / 2)`.
pub fn sl_regression_loss(
    pred_v: &[f64],
    pred_a: &[f64],
    true_v: &[f64],
    true_a: &[f64],
    epoch: usize,
    sched: &DynamicWeightSchedule,
) -> Result<f64> {
    sl_regression_loss_grad(pred_v, pred_a, true_v, true_a, epoch, sched).map(|(l, _, _)| l)
}

pub fn sl_regression_loss_grad(
    pred_v: &[f64],
    pred_a: &[f64],
    true_v: &[f64],
    true_a: &[f64],
    epoch: usize,
    sched: &DynamicWeightSchedule,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = pred_v.len();
    if [pred_a.len(), true_v.len(), true_a.len()].iter().any(|&l| l != n) {
        return Err(Error::LengthMismatch {
            left: n,
            right: pred_a.len().max(true_v.len()).max(true_a.len()),
        });
    }
    if n < 2 {
        return Err(Error::Degenerate("regression loss needs at least 2 values".into()));
    }
    let (f, g) = dynamic_weights(epoch, sched)?;
    let (mse_v, dmv) = mse_grad(true_v, pred_v)?;
    let (mse_a, dma) = mse_grad(true_a, pred_a)?;
    let (ccc_v, dcv) = ccc_grad(true_v, pred_v)?;
    let (ccc_a, dca) = ccc_grad(true_a, pred_a)?;
    let combine = |dm: &[f64], dc: &[f64]| -> Vec<f64> {
        dm.iter().zip(dc).map(|(m, c)| f * m - g * c / 2.0).collect()
    };
    let loss = f * (mse_v + mse_a) + g * (1.0 - (ccc_v + ccc_a) / 2.0);
    Ok((loss, combine(&dmv, &dcv), combine(&dma, &dca)))
}
