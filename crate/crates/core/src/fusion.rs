//! Late fusion of single-task and multi-task predictions.
//!
//! Per task, `fused = lambda * single + (1 - lambda) * multi`, applied to
//! VA values and to expression / AU probabilities. Labels are then decided
//! by argmax (expression) and a threshold (AUs).

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{annotation_header, AffectSample, AU_COUNT, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{p_au, score_au, score_expr, score_va};
use crate::models::Task;
use crate::records::{align_records, PredictionRecord};

pub const DEFAULT_AU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub lambda_va: f64,
    pub lambda_expr: f64,
    pub lambda_au: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { lambda_va: 0.4, lambda_expr: 0.6, lambda_au: 0.6 }
    }
}

impl FusionWeights {
    pub fn new(lambda_va: f64, lambda_expr: f64, lambda_au: f64) -> Result<Self> {
        let w = Self { lambda_va, lambda_expr, lambda_au };
        for task in Task::ALL {
            let l = w.get(task);
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::invalid(format!("lambda for {task} must lie in [0, 1], got {l}")));
            }
        }
        Ok(w)
    }

    pub fn uniform(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda, lambda)
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Va => self.lambda_va,
            Task::Expr => self.lambda_expr,
            Task::Au => self.lambda_au,
        }
    }

    fn set(&mut self, task: Task, lambda: f64) {
        match task {
            Task::Va => self.lambda_va = lambda,
            Task::Expr => self.lambda_expr = lambda,
            Task::Au => self.lambda_au = lambda,
        }
    }
}

/// Decided labels for one image, with the probabilities they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalPrediction {
    pub image_ref: String,
    pub valence: f64,
    pub arousal: f64,
    pub expr_label: usize,
    pub au_labels: [bool; AU_COUNT],
    pub expr_probs: Option<[f64; EXPR_CLASSES]>,
    pub au_probs: Option<[f64; AU_COUNT]>,
}

impl FinalPrediction {
    /// Decides labels from a record that covers all three tasks.
    pub fn from_record(record: &PredictionRecord, au_threshold: f64) -> Result<Self> {
        let missing = |task| Error::invalid(format!("{}: {task} prediction missing", record.image_ref));
        let [valence, arousal] = record.va.ok_or_else(|| missing(Task::Va))?;
        let expr = record.expr_probs.ok_or_else(|| missing(Task::Expr))?;
        let au = record.au_probs.ok_or_else(|| missing(Task::Au))?;
        Ok(Self {
            image_ref: record.image_ref.clone(),
            valence,
            arousal,
            expr_label: argmax(&expr),
            au_labels: au.map(|p| p >= au_threshold),
            expr_probs: Some(expr),
            au_probs: Some(au),
        })
    }

    /// A fully labeled annotation row read back as a decision.
    pub fn from_sample(sample: &AffectSample) -> Result<Self> {
        let incomplete =
            || Error::invalid(format!("{}: decided predictions must have every field set", sample.image_ref()));
        let [valence, arousal] = sample.va().ok_or_else(incomplete)?;
        let expr_label = sample.expression().ok_or_else(incomplete)?;
        let mut au_labels = [false; AU_COUNT];
        for (k, bit) in au_labels.iter_mut().enumerate() {
            *bit = sample.au(k).ok_or_else(incomplete)?;
        }
        Ok(Self {
            image_ref: sample.image_ref().to_string(),
            valence,
            arousal,
            expr_label,
            au_labels,
            expr_probs: None,
            au_probs: None,
        })
    }

    pub fn to_sample(&self) -> AffectSample {
        AffectSample::new(
            self.image_ref.clone(),
            Some([self.valence.clamp(-1.0, 1.0), self.arousal.clamp(-1.0, 1.0)]),
            Some(self.expr_label),
            self.au_labels.map(Some),
        )
        .expect("decided labels are in range")
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Convex blend of two vectors, kept inside the elementwise `[min, max]` of its inputs.
fn blend<const N: usize>(single: &[f64; N], multi: &[f64; N], lambda: f64) -> [f64; N] {
    std::array::from_fn(|k| {
        let (s, m) = (single[k], multi[k]);
        (lambda * s + (1.0 - lambda) * m).clamp(s.min(m), s.max(m))
    })
}

fn fuse_task<const N: usize>(
    task: Task,
    image_ref: &str,
    single: Option<[f64; N]>,
    multi: Option<[f64; N]>,
    lambda: f64,
) -> Result<[f64; N]> {
    let missing =
        |which: &str| Error::invalid(format!("{image_ref}: {which} record has no {task} prediction (lambda {lambda})"));
    if lambda == 1.0 {
        return single.ok_or_else(|| missing("single-task"));
    }
    if lambda == 0.0 {
        return multi.ok_or_else(|| missing("multi-task"));
    }
    let s = single.ok_or_else(|| missing("single-task"))?;
    let m = multi.ok_or_else(|| missing("multi-task"))?;
    Ok(blend(&s, &m, lambda))
}

/// Fuses all three tasks of an aligned pair of records.
fn fused_record(single: &PredictionRecord, multi: &PredictionRecord, w: &FusionWeights) -> Result<PredictionRecord> {
    if single.image_ref != multi.image_ref {
        return Err(Error::Misaligned(format!(
            "single-task record {} paired with multi-task record {}",
            single.image_ref, multi.image_ref
        )));
    }
    let r = &single.image_ref;
    Ok(PredictionRecord {
        image_ref: r.clone(),
        va: Some(fuse_task(Task::Va, r, single.va, multi.va, w.lambda_va)?),
        expr_probs: Some(fuse_task(Task::Expr, r, single.expr_probs, multi.expr_probs, w.lambda_expr)?),
        au_probs: Some(fuse_task(Task::Au, r, single.au_probs, multi.au_probs, w.lambda_au)?),
    })
}

pub fn fuse(single: &PredictionRecord, multi: &PredictionRecord, w: &FusionWeights) -> Result<FinalPrediction> {
    fuse_with_threshold(single, multi, w, DEFAULT_AU_THRESHOLD)
}

pub fn fuse_with_threshold(
    single: &PredictionRecord,
    multi: &PredictionRecord,
    w: &FusionWeights,
    au_threshold: f64,
) -> Result<FinalPrediction> {
    FinalPrediction::from_record(&fused_record(single, multi, w)?, au_threshold)
}

/// Pairs multi-task records with single-task records by image reference.
fn pair_up<'a>(
    single: &'a [PredictionRecord],
    multi: &'a [PredictionRecord],
) -> Result<Vec<(&'a PredictionRecord, &'a PredictionRecord)>> {
    if single.len() != multi.len() {
        return Err(Error::Misaligned(format!(
            "{} single-task records but {} multi-task records",
            single.len(),
            multi.len()
        )));
    }
    let order: Vec<&str> = single.iter().map(|r| r.image_ref.as_str()).collect();
    let multi = align_records(multi, &order)?;
    Ok(single.iter().zip(multi).collect())
}

/// Fuses two whole prediction sets; output follows the single-task order.
pub fn fuse_all(
    single: &[PredictionRecord],
    multi: &[PredictionRecord],
    w: &FusionWeights,
    au_threshold: f64,
) -> Result<Vec<FinalPrediction>> {
    pair_up(single, multi)?.into_iter().map(|(s, m)| fuse_with_threshold(s, m, w, au_threshold)).collect()
}

/// One grid point of a lambda search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    /// Mean CCC.
    pub va: f64,
    /// Macro expression F1.
    pub expr: f64,
    /// Mean AU F1.
    pub au: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSearch {
    pub weights: FusionWeights,
    pub table: Vec<LambdaRow>,
}

/// `{0, step, 2 step, ..., 1}`; the endpoint 1 is always included.
pub fn lambda_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 0.5) {
        return Err(Error::invalid(format!("lambda step must lie in (0, 0.5], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() < 1e-9 {
        let n = n as usize;
        return Ok((0..=n).map(|k| k as f64 / n as f64).collect());
    }
    let mut grid: Vec<f64> = (0..).map(|k| k as f64 * step).take_while(|l| *l < 1.0).collect();
    grid.push(1.0);
    Ok(grid)
}

fn task_metric(task: Task, fused: &[PredictionRecord], truth: &[AffectSample], au_threshold: f64) -> Result<f64> {
    match task {
        Task::Va => {
            let va: Vec<[f64; 2]> = fused.iter().map(|r| r.va.expect("fused")).collect();
            let (cv, ca) = score_va(&va, truth)?;
            Ok(0.5 * (cv + ca))
        }
        Task::Expr => {
            let labels: Vec<usize> = fused.iter().map(|r| argmax(&r.expr_probs.expect("fused"))).collect();
            Ok(score_expr(&labels, truth)?.mean)
        }
        Task::Au => {
            let bits: Vec<[bool; AU_COUNT]> =
                fused.iter().map(|r| r.au_probs.expect("fused").map(|p| p >= au_threshold)).collect();
            Ok(p_au(&score_au(&bits, truth)?))
        }
    }
}

/// Scans lambda on a grid for each task independently and keeps the best.
/// Ties go to the lambda closest to 0.5, then to the smaller one.
pub fn search_lambda(
    single: &[PredictionRecord],
    multi: &[PredictionRecord],
    truth: &[AffectSample],
    step: f64,
    au_threshold: f64,
) -> Result<LambdaSearch> {
    let grid = lambda_grid(step)?;
    if single.len() != multi.len() {
        return Err(Error::Misaligned(format!(
            "{} single-task records but {} multi-task records",
            single.len(),
            multi.len()
        )));
    }
    let order: Vec<&str> = truth.iter().map(AffectSample::image_ref).collect();
    let by_truth: Vec<(&PredictionRecord, &PredictionRecord)> =
        align_records(single, &order)?.into_iter().zip(align_records(multi, &order)?).collect();

    let mut table: Vec<LambdaRow> =
        grid.iter().map(|&lambda| LambdaRow { lambda, va: f64::NAN, expr: f64::NAN, au: f64::NAN }).collect();
    let mut weights = FusionWeights::default();
    for task in Task::ALL {
        let mut best: Option<(f64, f64)> = None;
        for row in table.iter_mut() {
            let w = FusionWeights::uniform(row.lambda)?;
            let fused: Vec<PredictionRecord> =
                by_truth.iter().map(|(s, m)| fused_task_only(task, s, m, &w)).collect::<Result<_>>()?;
            let score = task_metric(task, &fused, truth, au_threshold)?;
            match task {
                Task::Va => row.va = score,
                Task::Expr => row.expr = score,
                Task::Au => row.au = score,
            }
            let better = match best {
                None => true,
                Some((bl, bs)) => score > bs || (score == bs && tie_preferred(row.lambda, bl)),
            };
            if better {
                best = Some((row.lambda, score));
            }
        }
        weights.set(task, best.expect("grid is non-empty").0);
    }
    Ok(LambdaSearch { weights, table })
}

/// Tie-break between equally scoring lambdas: closer to 0.5 wins, then the
/// smaller one. Distances within 1e-9 count as equal so that grid rounding
/// (0.5 - 0.3 vs 0.7 - 0.5) does not decide.
fn tie_preferred(candidate: f64, incumbent: f64) -> bool {
    let dc = (candidate - 0.5).abs();
    let di = (incumbent - 0.5).abs();
    if (dc - di).abs() > 1e-9 {
        dc < di
    } else {
        candidate < incumbent
    }
}

fn fused_task_only(
    task: Task,
    s: &PredictionRecord,
    m: &PredictionRecord,
    w: &FusionWeights,
) -> Result<PredictionRecord> {
    let r = &s.image_ref;
    let mut out = PredictionRecord::empty(r.clone());
    match task {
        Task::Va => out.va = Some(fuse_task(task, r, s.va, m.va, w.lambda_va)?),
        Task::Expr => out.expr_probs = Some(fuse_task(task, r, s.expr_probs, m.expr_probs, w.lambda_expr)?),
        Task::Au => out.au_probs = Some(fuse_task(task, r, s.au_probs, m.au_probs, w.lambda_au)?),
    }
    Ok(out)
}

/// Writes decided labels in the annotation CSV schema.
pub fn write_final(path: impl AsRef<Path>, preds: &[FinalPrediction]) -> Result<()> {
    let samples: Vec<AffectSample> = preds.iter().map(FinalPrediction::to_sample).collect();
    crate::annotations::write_annotations(path, &samples)
}

pub fn read_final(path: impl AsRef<Path>) -> Result<Vec<FinalPrediction>> {
    crate::annotations::load_annotations(path)?.iter().map(FinalPrediction::from_sample).collect()
}

/// Writes the per-lambda metric table as CSV.
pub fn write_lambda_table(path: impl AsRef<Path>, table: &[LambdaRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in table {
        w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// True when the file header matches the decided-label schema.
pub fn is_final_csv(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header = rdr.headers().map_err(|e| Error::io(path, e.into()))?;
    Ok(header.iter().eq(annotation_header().iter().map(String::as_str)))
}
