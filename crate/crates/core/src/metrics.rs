//! Challenge evaluation: CCC per VA dimension, F1 per expression class and
//! per AU, and the composite score
//! `P = 0.5 (CCC_a + CCC_v) + 0.125 sum(F1_expr) + sum(F1_au) / 12`.

use serde::{Deserialize, Serialize};

use crate::annotations::{AffectSample, AU_CODES, AU_COUNT, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::fusion::FinalPrediction;
use crate::losses::ccc;
use crate::models::Task;
use crate::records::{align_records, index_by_ref, PredictionRecord};

/// F1 of the positive class. Zero when there is no true positive, which
/// includes the case of no positives at all.
pub fn f1_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!("f1: {} predictions but {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("f1 of an empty sequence"));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    pub per_class: [f64; EXPR_CLASSES],
    pub mean: f64,
}

/// One-vs-rest F1 for each expression class and their unweighted mean.
pub fn macro_f1_expr(pred: &[usize], truth: &[usize]) -> Result<MacroF1> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("macro f1: prediction and label counts differ"));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&c| c >= EXPR_CLASSES) {
        return Err(Error::invalid(format!("expression label {bad} out of range")));
    }
    let mut per_class = [0.0; EXPR_CLASSES];
    for (class, f1) in per_class.iter_mut().enumerate() {
        let p: Vec<bool> = pred.iter().map(|&c| c == class).collect();
        let t: Vec<bool> = truth.iter().map(|&c| c == class).collect();
        *f1 = f1_binary(&p, &t)?;
    }
    let mean = per_class.iter().sum::<f64>() / EXPR_CLASSES as f64;
    Ok(MacroF1 { per_class, mean })
}

/// Per-task components of `P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentScores {
    pub p_va: f64,
    pub p_expr: f64,
    pub p_au: f64,
    pub p_total: f64,
}

impl ComponentScores {
    pub fn new(p_va: f64, p_expr: f64, p_au: f64) -> Self {
        Self { p_va, p_expr, p_au, p_total: p_va + p_expr + p_au }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.p_va * factor, self.p_expr * factor, self.p_au * factor)
    }
}

pub fn p_va(ccc_valence: f64, ccc_arousal: f64) -> f64 {
    0.5 * (ccc_arousal + ccc_valence)
}

pub fn p_expr(f1_expr: &[f64; EXPR_CLASSES]) -> f64 {
    0.125 * f1_expr.iter().sum::<f64>()
}

pub fn p_au(f1_au: &[f64; AU_COUNT]) -> f64 {
    f1_au.iter().sum::<f64>() / AU_COUNT as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub f1_expr: [f64; EXPR_CLASSES],
    pub f1_au: [f64; AU_COUNT],
    pub p_va: f64,
    pub p_expr: f64,
    pub p_au: f64,
    pub p_total: f64,
}

impl EvalReport {
    pub fn from_parts(
        ccc_valence: f64,
        ccc_arousal: f64,
        f1_expr: [f64; EXPR_CLASSES],
        f1_au: [f64; AU_COUNT],
    ) -> Self {
        let c = ComponentScores::new(p_va(ccc_valence, ccc_arousal), p_expr(&f1_expr), p_au(&f1_au));
        Self {
            ccc_valence,
            ccc_arousal,
            f1_expr,
            f1_au,
            p_va: c.p_va,
            p_expr: c.p_expr,
            p_au: c.p_au,
            p_total: c.p_total,
        }
    }

    pub fn components(&self) -> ComponentScores {
        ComponentScores::new(self.p_va, self.p_expr, self.p_au)
    }

    /// Components on the x100 scale used in result tables.
    pub fn percent(&self) -> ComponentScores {
        self.components().scaled(100.0)
    }

    /// JSON with the [0, 1] fields plus a `percent` block and named AUs.
    pub fn to_json(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("report serializes");
        let au_named: serde_json::Map<_, _> =
            AU_CODES.iter().zip(self.f1_au).map(|(c, f)| (format!("AU{c}"), serde_json::Value::from(f))).collect();
        let obj = value.as_object_mut().expect("object");
        obj.insert("f1_au_by_code".into(), au_named.into());
        obj.insert("percent".into(), serde_json::to_value(self.percent()).expect("serializes"));
        value
    }
}

/// Scores for whichever tasks a prediction set covers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialReport {
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub f1_expr: Option<[f64; EXPR_CLASSES]>,
    pub f1_au: Option<[f64; AU_COUNT]>,
    pub p_va: Option<f64>,
    pub p_expr: Option<f64>,
    pub p_au: Option<f64>,
    pub p_total: Option<f64>,
}

impl PartialReport {
    pub fn task_score(&self, task: Task) -> Option<f64> {
        match task {
            Task::Va => self.p_va,
            Task::Expr => self.p_expr,
            Task::Au => self.p_au,
        }
    }

    pub fn complete(&self) -> Option<EvalReport> {
        Some(EvalReport::from_parts(self.ccc_valence?, self.ccc_arousal?, self.f1_expr?, self.f1_au?))
    }
}

/// `(ccc_valence, ccc_arousal)` over VA-valid samples; inputs aligned by position.
pub fn score_va(pred: &[[f64; 2]], truth: &[AffectSample]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Misaligned("va predictions and labels differ in length".into()));
    }
    let (mut px, mut py, mut tx, mut ty) = (vec![], vec![], vec![], vec![]);
    for (p, t) in pred.iter().zip(truth) {
        if let Some([v, a]) = t.va() {
            px.push(p[0]);
            py.push(p[1]);
            tx.push(v);
            ty.push(a);
        }
    }
    if tx.len() < 2 {
        return Err(Error::EmptyTask(Task::Va));
    }
    Ok((ccc(&px, &tx)?, ccc(&py, &ty)?))
}

/// Macro F1 over expression-valid samples; inputs aligned by position.
pub fn score_expr(pred: &[usize], truth: &[AffectSample]) -> Result<MacroF1> {
    if pred.len() != truth.len() {
        return Err(Error::Misaligned("expression predictions and labels differ in length".into()));
    }
    let (p, t): (Vec<usize>, Vec<usize>) =
        pred.iter().zip(truth).filter_map(|(&p, t)| t.expression().map(|y| (p, y))).unzip();
    if t.is_empty() {
        return Err(Error::EmptyTask(Task::Expr));
    }
    macro_f1_expr(&p, &t)
}

/// Per-AU F1 over valid cells; inputs aligned by position.
pub fn score_au(pred: &[[bool; AU_COUNT]], truth: &[AffectSample]) -> Result<[f64; AU_COUNT]> {
    if pred.len() != truth.len() {
        return Err(Error::Misaligned("AU predictions and labels differ in length".into()));
    }
    if !truth.iter().any(AffectSample::any_au_valid) {
        return Err(Error::EmptyTask(Task::Au));
    }
    let mut f1 = [0.0; AU_COUNT];
    for (k, out) in f1.iter_mut().enumerate() {
        let (p, t): (Vec<bool>, Vec<bool>) =
            pred.iter().zip(truth).filter_map(|(p, s)| s.au(k).map(|y| (p[k], y))).unzip();
        if t.is_empty() {
            return Err(Error::invalid(format!("au: AU{} has no valid labels", AU_CODES[k])));
        }
        *out = f1_binary(&p, &t)?;
    }
    Ok(f1)
}

/// Pairs each ground-truth sample with the prediction for the same image.
pub(crate) fn align_to_truth<'a, T>(
    preds: &'a [T],
    truth: &[AffectSample],
    image_ref: impl Fn(&T) -> &str,
) -> Result<Vec<&'a T>> {
    let index = index_by_ref(preds.iter().map(&image_ref))?;
    truth
        .iter()
        .map(|s| {
            index
                .get(s.image_ref())
                .map(|&i| &preds[i])
                .ok_or_else(|| Error::Misaligned(format!("no prediction for {}", s.image_ref())))
        })
        .collect()
}

/// Full challenge report for decided predictions.
pub fn evaluate(preds: &[FinalPrediction], truth: &[AffectSample]) -> Result<EvalReport> {
    let aligned = align_to_truth(preds, truth, |p| p.image_ref.as_str())?;
    let va: Vec<[f64; 2]> = aligned.iter().map(|p| [p.valence, p.arousal]).collect();
    let expr: Vec<usize> = aligned.iter().map(|p| p.expr_label).collect();
    let au: Vec<[bool; AU_COUNT]> = aligned.iter().map(|p| p.au_labels).collect();
    let (cv, ca) = score_va(&va, truth)?;
    let f1_expr = score_expr(&expr, truth)?.per_class;
    let f1_au = score_au(&au, truth)?;
    Ok(EvalReport::from_parts(cv, ca, f1_expr, f1_au))
}

/// Scores every task present in all records, deciding labels by argmax and
/// `au_threshold`. Tasks absent from the records are left out.
pub fn evaluate_records(
    records: &[PredictionRecord],
    truth: &[AffectSample],
    au_threshold: f64,
) -> Result<PartialReport> {
    let order: Vec<&str> = truth.iter().map(AffectSample::image_ref).collect();
    let aligned = align_records(records, &order)?;
    let mut report = PartialReport::default();
    if aligned.iter().all(|r| r.va.is_some()) {
        let va: Vec<[f64; 2]> = aligned.iter().map(|r| r.va.expect("checked")).collect();
        let (cv, ca) = score_va(&va, truth)?;
        report.ccc_valence = Some(cv);
        report.ccc_arousal = Some(ca);
        report.p_va = Some(p_va(cv, ca));
    }
    if aligned.iter().all(|r| r.expr_probs.is_some()) {
        let labels: Vec<usize> =
            aligned.iter().map(|r| crate::fusion::argmax(&r.expr_probs.expect("checked"))).collect();
        let f1 = score_expr(&labels, truth)?.per_class;
        report.f1_expr = Some(f1);
        report.p_expr = Some(p_expr(&f1));
    }
    if aligned.iter().all(|r| r.au_probs.is_some()) {
        let bits: Vec<[bool; AU_COUNT]> =
            aligned.iter().map(|r| r.au_probs.expect("checked").map(|p| p >= au_threshold)).collect();
        let f1 = score_au(&bits, truth)?;
        report.f1_au = Some(f1);
        report.p_au = Some(p_au(&f1));
    }
    if let (Some(a), Some(b), Some(c)) = (report.p_va, report.p_expr, report.p_au) {
        report.p_total = Some(a + b + c);
    }
    Ok(report)
}
