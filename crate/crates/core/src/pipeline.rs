//! File-to-file steps behind the command-line tool.

use std::path::{Path, PathBuf};

use crate::annotations::{compute_stats, load_annotations, AffectSample, DatasetStats};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_all, is_final_csv, read_final, search_lambda, write_final, write_lambda_table, FusionWeights,
};
use crate::fusion::{FinalPrediction, LambdaSearch};
use crate::images::DiskImages;
use crate::metrics::{evaluate, evaluate_records, EvalReport};
use crate::models::AffectModel;
use crate::records::{read_predictions, write_predictions, PredictionRecord};
use crate::training::{predict, split_validation, train, TrainConfig, TrainOutcome};

/// Reads annotations and writes their statistics as TOML.
pub fn ingest(annotations: &Path, stats_out: &Path) -> Result<DatasetStats> {
    let samples = load_annotations(annotations)?;
    let stats = compute_stats(&samples)?;
    let text = toml::to_string(&stats).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(stats_out, text).map_err(|e| Error::io(stats_out, e))?;
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct TrainJob {
    pub config: TrainConfig,
    pub annotations: PathBuf,
    /// Held-out annotations; when absent, `config.val_fraction` is split off.
    pub val_annotations: Option<PathBuf>,
    pub images_root: PathBuf,
    /// Checkpoint directory; also receives the training log.
    pub out: PathBuf,
}

pub fn run_training(job: TrainJob) -> Result<TrainOutcome> {
    let mut config = job.config;
    config.checkpoint_dir = Some(job.out);
    let samples = load_annotations(&job.annotations)?;
    let (train_set, val_set) = match &job.val_annotations {
        Some(p) => (samples, load_annotations(p)?),
        None => split_validation(&samples, config.val_fraction, config.seed),
    };
    let images = DiskImages::new(&job.images_root, config.preprocess.clone())?;
    train(&config, &train_set, &val_set, &images)
}

/// Runs every checkpoint over the annotated images and merges the outputs
/// per sample. Checkpoints must cover disjoint tasks.
pub fn predict_checkpoints(
    checkpoints: &[PathBuf],
    annotations: &Path,
    images_root: &Path,
) -> Result<Vec<PredictionRecord>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("at least one checkpoint is required"));
    }
    let samples = load_annotations(annotations)?;
    let mut merged: Option<Vec<PredictionRecord>> = None;
    for dir in checkpoints {
        let model = AffectModel::load(dir)?;
        let images = DiskImages::new(images_root, model.preprocess().clone())?;
        let records = predict(&model, &samples, &images)?;
        merged = Some(match merged {
            None => records,
            Some(mut acc) => {
                for (a, r) in acc.iter_mut().zip(&records) {
                    a.merge(r)?;
                }
                acc
            }
        });
    }
    Ok(merged.expect("non-empty"))
}

pub fn predict_to_file(checkpoints: &[PathBuf], annotations: &Path, images_root: &Path, out: &Path) -> Result<usize> {
    let records = predict_checkpoints(checkpoints, annotations, images_root)?;
    write_predictions(out, &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone)]
pub struct FuseJob {
    pub single: PathBuf,
    pub multi: PathBuf,
    pub weights: FusionWeights,
    pub au_threshold: f64,
    pub out: PathBuf,
    /// Ground truth, grid step and table path for a lambda search.
    pub search: Option<(PathBuf, f64, PathBuf)>,
}

/// Fuses two prediction files. With a search, the searched weights replace
/// `job.weights`.
pub fn fuse_files(job: &FuseJob) -> Result<(FusionWeights, Option<LambdaSearch>, Vec<FinalPrediction>)> {
    let single = read_predictions(&job.single)?;
    let multi = read_predictions(&job.multi)?;
    let (weights, search) = match &job.search {
        Some((gt, step, table)) => {
            let truth = load_annotations(gt)?;
            let s = search_lambda(&single, &multi, &truth, *step, job.au_threshold)?;
            write_lambda_table(table, &s.table)?;
            (s.weights, Some(s))
        }
        None => (job.weights, None),
    };
    let fused = fuse_all(&single, &multi, &weights, job.au_threshold)?;
    write_final(&job.out, &fused)?;
    Ok((weights, search, fused))
}

/// Scores a predictions file against ground truth. Decided-label files get
/// a full report; probability files get whichever tasks they cover.
pub fn evaluate_file(preds: &Path, gt: &Path, au_threshold: f64) -> Result<serde_json::Value> {
    let truth: Vec<AffectSample> = load_annotations(gt)?;
    if is_final_csv(preds)? {
        let report: EvalReport = evaluate(&read_final(preds)?, &truth)?;
        return Ok(report.to_json());
    }
    let partial = evaluate_records(&read_predictions(preds)?, &truth, au_threshold)?;
    Ok(match partial.complete() {
        Some(full) => full.to_json(),
        None => serde_json::to_value(partial)?,
    })
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
