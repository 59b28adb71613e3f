//! Task losses with analytic gradients.
//!
//! Each loss returns its value together with the gradient with respect to
//! the network outputs it consumes (expression logits, AU logits, squashed
//! VA predictions). Training feeds those gradients back through the
//! backbone. All reductions are means over valid entries; invalid entries
//! get an exact zero gradient.

use serde::{Deserialize, Serialize};

use crate::annotations::{AffectSample, ClassWeights, AU_COUNT, EXPR_CLASSES};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FocalConfig {
    /// Focusing exponent; 1 reproduces the `1 - p` sample weight, 0 is plain BCE.
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

impl FocalConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        let cfg = Self { gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.is_finite() && self.gamma >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!("focal gamma must be >= 0, got {}", self.gamma)))
        }
    }
}

/// A scalar loss and its gradient with respect to `N`-wide outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss<const N: usize> {
    pub value: f64,
    pub grad: Vec<[f64; N]>,
    /// Number of valid entries the mean was taken over (samples or cells).
    pub n_valid: usize,
    /// Set when the batch had too few valid entries; value and grad are zero.
    pub empty: bool,
}

impl<const N: usize> TaskLoss<N> {
    fn empty(batch: usize) -> Self {
        Self { value: 0.0, grad: vec![[0.0; N]; batch], n_valid: 0, empty: true }
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: {a} outputs but {b} labels")))
    }
}

/// Mean over expression-valid samples of `w_y * -ln softmax(logits)[y]`.
pub fn weighted_cross_entropy(
    logits: &[[f64; EXPR_CLASSES]],
    labels: &[Option<usize>],
    weights: &ClassWeights,
) -> Result<TaskLoss<EXPR_CLASSES>> {
    check_len("weighted_cross_entropy", logits.len(), labels.len())?;
    let n_valid = labels.iter().flatten().count();
    if n_valid == 0 {
        return Ok(TaskLoss::empty(logits.len()));
    }
    let scale = 1.0 / n_valid as f64;
    let mut out = TaskLoss::empty(logits.len());
    out.empty = false;
    out.n_valid = n_valid;
    let mut sum = 0.0;
    for (i, (z, y)) in logits.iter().zip(labels).enumerate() {
        let Some(y) = *y else { continue };
        if y >= EXPR_CLASSES {
            return Err(Error::invalid(format!("expression label {y} out of range")));
        }
        let w = weights.get(y);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        sum += w * (lse - z[y]);
        for (k, g) in out.grad[i].iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            let target = if k == y { 1.0 } else { 0.0 };
            *g = w * (p - target) * scale;
        }
    }
    out.value = sum * scale;
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over valid (sample, AU) cells of `-(1 - p_t)^gamma * ln p_t`.
pub fn focal_loss(
    logits: &[[f64; AU_COUNT]],
    labels: &[[Option<bool>; AU_COUNT]],
    cfg: &FocalConfig,
) -> Result<TaskLoss<AU_COUNT>> {
    check_len("focal_loss", logits.len(), labels.len())?;
    cfg.validate()?;
    let n_valid = labels.iter().flatten().flatten().count();
    if n_valid == 0 {
        return Ok(TaskLoss::empty(logits.len()));
    }
    let gamma = cfg.gamma;
    let scale = 1.0 / n_valid as f64;
    let mut out = TaskLoss::empty(logits.len());
    out.empty = false;
    out.n_valid = n_valid;
    let mut sum = 0.0;
    for (i, (z, y)) in logits.iter().zip(labels).enumerate() {
        for k in 0..AU_COUNT {
            let Some(positive) = y[k] else { continue };
            let sign = if positive { 1.0 } else { -1.0 };
            let p_t = sigmoid(sign * z[k]).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let q = 1.0 - p_t;
            let log_p = p_t.ln();
            let focus = q.powf(gamma);
            sum -= focus * log_p;
            // d/dz of -(1-p_t)^g ln p_t with dp_t/dz = sign * p_t * (1 - p_t).
            // Evaluated at the clamped p_t so saturated cells keep a signal.
            out.grad[i][k] = sign * (gamma * focus * p_t * log_p - focus * q) * scale;
        }
    }
    out.value = sum * scale;
    Ok(out)
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    var_x: f64,
    var_y: f64,
    cov: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut var_x, mut var_y, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mean_x;
        let dy = b - mean_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    Moments { mean_x, mean_y, var_x: var_x / n, var_y: var_y / n, cov: cov / n }
}

fn ccc_parts(pred: &[f64], target: &[f64]) -> Result<(f64, Moments, f64)> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!("ccc: {} predictions but {} targets", pred.len(), target.len())));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("ccc needs at least two pairs"));
    }
    let m = moments(pred, target);
    let shift = m.mean_x - m.mean_y;
    let denom = m.var_x + m.var_y + shift * shift;
    // Zero only when both sequences are constant and equal.
    let value = if denom == 0.0 { 1.0 } else { (2.0 * m.cov / denom).clamp(-1.0, 1.0) };
    Ok((value, m, denom))
}

/// Lin's concordance correlation coefficient with population moments.
pub fn ccc(pred: &[f64], target: &[f64]) -> Result<f64> {
    ccc_parts(pred, target).map(|(v, _, _)| v)
}

/// CCC and its gradient with respect to `pred`.
pub fn ccc_with_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (value, m, denom) = ccc_parts(pred, target)?;
    if denom == 0.0 {
        return Ok((value, vec![0.0; pred.len()]));
    }
    let n = pred.len() as f64;
    let num = 2.0 * m.cov;
    let shift = m.mean_x - m.mean_y;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(x, y)| {
            let d_num = 2.0 * (y - m.mean_y) / n;
            let d_den = 2.0 * (x - m.mean_x) / n + 2.0 * shift / n;
            (d_num * denom - num * d_den) / (denom * denom)
        })
        .collect();
    Ok((value, grad))
}

/// `1 - (ccc_valence + ccc_arousal) / 2` over VA-valid samples.
pub fn ccc_loss(pred_va: &[[f64; 2]], target_va: &[Option<[f64; 2]>]) -> Result<TaskLoss<2>> {
    check_len("ccc_loss", pred_va.len(), target_va.len())?;
    let valid: Vec<usize> = (0..pred_va.len()).filter(|&i| target_va[i].is_some()).collect();
    if valid.len() < 2 {
        return Ok(TaskLoss::empty(pred_va.len()));
    }
    let mut out = TaskLoss::empty(pred_va.len());
    out.empty = false;
    out.n_valid = valid.len();
    let mut total_ccc = 0.0;
    #[allow(clippy::needless_range_loop)]
    for dim in 0..2 {
        let x: Vec<f64> = valid.iter().map(|&i| pred_va[i][dim]).collect();
        let y: Vec<f64> = valid.iter().map(|&i| target_va[i].expect("valid")[dim]).collect();
        let (c, g) = ccc_with_grad(&x, &y)?;
        total_ccc += c;
        for (&i, gi) in valid.iter().zip(g) {
            out.grad[i][dim] = -0.5 * gi;
        }
    }
    out.value = 1.0 - 0.5 * total_ccc;
    Ok(out)
}

/// Per-sample network outputs for a batch, in f64.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchOutputs {
    /// Squashed valence/arousal predictions.
    pub va: Vec<[f64; 2]>,
    pub expr_logits: Vec<[f64; EXPR_CLASSES]>,
    pub au_logits: Vec<[f64; AU_COUNT]>,
}

impl BatchOutputs {
    pub fn len(&self) -> usize {
        self.va.len()
    }

    pub fn is_empty(&self) -> bool {
        self.va.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_expr: f64,
    pub l_au: f64,
    pub l_va: f64,
    pub total: f64,
    pub expr_empty: bool,
    pub au_empty: bool,
    pub va_empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub expr: TaskLoss<EXPR_CLASSES>,
    pub au: TaskLoss<AU_COUNT>,
    pub va: TaskLoss<2>,
}

pub fn expr_labels(labels: &[AffectSample]) -> Vec<Option<usize>> {
    labels.iter().map(AffectSample::expression).collect()
}

pub fn au_labels(labels: &[AffectSample]) -> Vec<[Option<bool>; AU_COUNT]> {
    labels.iter().map(AffectSample::aus).collect()
}

pub fn va_labels(labels: &[AffectSample]) -> Vec<Option<[f64; 2]>> {
    labels.iter().map(AffectSample::va).collect()
}

/// Sum of the three task losses, each over its own valid subset.
pub fn total_loss(
    outputs: &BatchOutputs,
    labels: &[AffectSample],
    weights: &ClassWeights,
    cfg: &FocalConfig,
) -> Result<TotalLoss> {
    if labels.is_empty() {
        return Err(Error::invalid("total_loss on an empty batch"));
    }
    if outputs.expr_logits.len() != labels.len() || outputs.au_logits.len() != labels.len() {
        return Err(Error::invalid("total_loss: output and label batch sizes differ"));
    }
    let expr = weighted_cross_entropy(&outputs.expr_logits, &expr_labels(labels), weights)?;
    let au = focal_loss(&outputs.au_logits, &au_labels(labels), cfg)?;
    let va = ccc_loss(&outputs.va, &va_labels(labels))?;
    if expr.empty && au.empty && va.empty {
        return Err(Error::DegenerateBatch);
    }
    let breakdown = LossBreakdown {
        l_expr: expr.value,
        l_au: au.value,
        l_va: va.value,
        total: expr.value + au.value + va.value,
        expr_empty: expr.empty,
        au_empty: au.empty,
        va_empty: va.empty,
    };
    Ok(TotalLoss { breakdown, expr, au, va })
}
