//! Optimization loop, checkpoint selection and batch prediction.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    compute_class_weights, compute_class_weights_merged, compute_stats, AffectSample, ClassWeights, ExpressionNames,
    AU_COUNT, EXPR_CLASSES,
};
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_AU_THRESHOLD;
use crate::images::{ImageSource, Preprocess};
use crate::losses::{
    au_labels, ccc_loss, expr_labels, focal_loss, total_loss, va_labels, weighted_cross_entropy, BatchOutputs,
    FocalConfig, LossBreakdown, TaskLoss,
};
use crate::metrics::{evaluate_records, PartialReport};
use crate::models::{build_model, AffectModel, BackboneSpec, Mode, ModelAssembly, RawOutputs, Task};
use crate::records::PredictionRecord;

pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Shuffling uses its own ChaCha8 stream, `seed ^ SHUFFLE_STREAM`, so it
/// does not depend on how many draws parameter initialization made.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

type Snapshot = Vec<(String, Tensor)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMetric {
    /// Composite challenge score.
    P,
    Va,
    Expr,
    Au,
}

impl SelectMetric {
    pub fn default_for(mode: Mode) -> Self {
        match mode {
            Mode::Multi => SelectMetric::P,
            Mode::SingleVa => SelectMetric::Va,
            Mode::SingleExpr => SelectMetric::Expr,
            Mode::SingleAu => SelectMetric::Au,
        }
    }

    fn tasks(self) -> &'static [Task] {
        match self {
            SelectMetric::P => &Task::ALL,
            SelectMetric::Va => &[Task::Va],
            SelectMetric::Expr => &[Task::Expr],
            SelectMetric::Au => &[Task::Au],
        }
    }

    fn value(self, report: &PartialReport) -> Option<f64> {
        match self {
            SelectMetric::P => report.p_total,
            SelectMetric::Va => report.task_score(Task::Va),
            SelectMetric::Expr => report.task_score(Task::Expr),
            SelectMetric::Au => report.task_score(Task::Au),
        }
    }
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

fn default_au_threshold() -> f64 {
    DEFAULT_AU_THRESHOLD
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub focal: FocalConfig,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Defaults to P for multi mode and the task's own score otherwise.
    #[serde(default)]
    pub select_metric: Option<SelectMetric>,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Give expression classes with no training samples the weight of class 7.
    #[serde(default)]
    pub merge_empty_expr_classes: bool,
    #[serde(default = "default_au_threshold")]
    pub au_threshold: f64,
    /// Held-out fraction when no separate validation file is given.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub expression_names: ExpressionNames,
}

impl TrainConfig {
    pub fn new(mode: Mode, backbone: BackboneSpec, preprocess: Preprocess, max_epochs: usize) -> Self {
        Self {
            mode,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_epochs,
            max_steps: None,
            seed: 0,
            focal: FocalConfig::default(),
            checkpoint_dir: None,
            select_metric: None,
            backbone,
            preprocess,
            merge_empty_expr_classes: false,
            au_threshold: DEFAULT_AU_THRESHOLD,
            val_fraction: default_val_fraction(),
            expression_names: ExpressionNames::default(),
        }
    }

    /// Parses a TOML config (JSON is accepted too).
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn select_metric(&self) -> SelectMetric {
        self.select_metric.unwrap_or_else(|| SelectMetric::default_for(self.mode))
    }

    pub fn assembly(&self) -> ModelAssembly {
        ModelAssembly::new(self.mode, self.backbone.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 (CCC needs two pairs)"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.au_threshold) {
            return Err(Error::invalid("au_threshold must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        self.focal.validate()?;
        self.preprocess.validate()?;
        self.assembly().validate()
    }
}

/// Tasks whose loss was skipped in a step for lack of valid labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub va: u64,
    pub expr: u64,
    pub au: u64,
    /// Batches with no usable label at all (no optimizer step).
    pub batches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    /// False when the batch had nothing to learn from.
    pub updated: bool,
}

fn rows<const N: usize>(t: &Tensor) -> Result<Vec<[f64; N]>> {
    let v = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(v.into_iter().map(|r| std::array::from_fn(|k| r[k])).collect())
}

fn grad_tensor<const N: usize>(loss: &TaskLoss<N>, like: &Tensor) -> Result<Tensor> {
    let flat: Vec<f32> = loss.grad.iter().flat_map(|g| g.iter().map(|x| *x as f32)).collect();
    Ok(Tensor::from_vec(flat, like.dims(), like.device())?)
}

/// Model plus Adam state; one call to [`Trainer::step`] is one update.
pub struct Trainer {
    model: AffectModel,
    optimizer: AdamW,
    weights: ClassWeights,
    focal: FocalConfig,
    steps: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, weights: ClassWeights) -> Result<Self> {
        config.validate()?;
        let model = build_model(&config.assembly(), &config.preprocess, config.seed)?;
        let params = ParamsAdamW { lr: config.learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let optimizer = AdamW::new(model.trainable_vars(), params)?;
        Ok(Self { model, optimizer, weights, focal: config.focal, steps: 0 })
    }

    pub fn model(&self) -> &AffectModel {
        &self.model
    }

    pub fn into_model(self) -> AffectModel {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Losses of the trained tasks for one batch of network outputs.
    fn losses(&self, raw: &RawOutputs, labels: &[AffectSample]) -> Result<(LossBreakdown, Vec<(Task, Tensor)>)> {
        let n = labels.len();
        let out = |task: Task| raw.get(task).ok_or_else(|| Error::invalid(format!("model has no {task} head")));
        let mode = self.model.mode();
        let mut b = LossBreakdown { expr_empty: true, au_empty: true, va_empty: true, ..LossBreakdown::default() };
        let mut grads = Vec::new();
        if mode == Mode::Multi {
            let outputs = BatchOutputs {
                va: rows(out(Task::Va)?)?,
                expr_logits: rows(out(Task::Expr)?)?,
                au_logits: rows(out(Task::Au)?)?,
            };
            match total_loss(&outputs, labels, &self.weights, &self.focal) {
                Ok(t) => {
                    b = t.breakdown;
                    grads.push((Task::Va, grad_tensor(&t.va, out(Task::Va)?)?));
                    grads.push((Task::Expr, grad_tensor(&t.expr, out(Task::Expr)?)?));
                    grads.push((Task::Au, grad_tensor(&t.au, out(Task::Au)?)?));
                }
                Err(Error::DegenerateBatch) => {}
                Err(e) => return Err(e),
            }
            return Ok((b, grads));
        }
        let task = mode.tasks()[0];
        let t = out(task)?;
        debug_assert_eq!(t.dims()[0], n);
        match task {
            Task::Va => {
                let l = ccc_loss(&rows(t)?, &va_labels(labels))?;
                (b.l_va, b.va_empty) = (l.value, l.empty);
                if !l.empty {
                    grads.push((task, grad_tensor(&l, t)?));
                }
            }
            Task::Expr => {
                let l = weighted_cross_entropy(&rows::<EXPR_CLASSES>(t)?, &expr_labels(labels), &self.weights)?;
                (b.l_expr, b.expr_empty) = (l.value, l.empty);
                if !l.empty {
                    grads.push((task, grad_tensor(&l, t)?));
                }
            }
            Task::Au => {
                let l = focal_loss(&rows::<AU_COUNT>(t)?, &au_labels(labels), &self.focal)?;
                (b.l_au, b.au_empty) = (l.value, l.empty);
                if !l.empty {
                    grads.push((task, grad_tensor(&l, t)?));
                }
            }
        }
        b.total = b.l_expr + b.l_au + b.l_va;
        Ok((b, grads))
    }

    /// One Adam update on a batch. Batches with no valid label for any
    /// trained task leave parameters and optimizer state untouched.
    pub fn step(&mut self, labels: &[AffectSample], images: &Tensor) -> Result<StepOutcome> {
        if images.dims().first() != Some(&labels.len()) {
            return Err(Error::invalid("image and label batch sizes differ"));
        }
        let raw = self.model.forward_t(images, true)?;
        let (breakdown, grads) = self.losses(&raw, labels)?;
        if grads.is_empty() {
            return Ok(StepOutcome { breakdown, updated: false });
        }
        // Surrogate whose gradient w.r.t. each head output is the analytic loss gradient.
        let mut surrogate: Option<Tensor> = None;
        for (task, g) in &grads {
            let term = (raw.get(*task).expect("head exists") * g)?.sum_all()?;
            surrogate = Some(match surrogate {
                Some(s) => (s + term)?,
                None => term,
            });
        }
        let grad_store = surrogate.expect("non-empty").backward()?;
        self.optimizer.step(&grad_store)?;
        self.steps += 1;
        Ok(StepOutcome { breakdown, updated: true })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean over updating steps of each loss term.
    pub loss: LossBreakdown,
    pub skipped: SkipCounts,
    pub val: PartialReport,
    pub select_metric: SelectMetric,
    pub select_value: f64,
    /// Running maximum of `select_value`.
    pub best_value: f64,
    pub is_best: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model restored to the best validation epoch.
    pub model: AffectModel,
    pub log: Vec<EpochLog>,
    /// Total loss of every updating step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_value: f64,
    pub class_weights: ClassWeights,
}

fn preflight(config: &TrainConfig, train: &[AffectSample], val: &[AffectSample]) -> Result<ClassWeights> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation sets must be non-empty"));
    }
    let stats = compute_stats(train)?;
    let available = |task: Task, stats: &crate::annotations::DatasetStats| match task {
        Task::Va => stats.n_va_valid >= 2,
        Task::Expr => stats.n_expr_valid >= 1,
        Task::Au => stats.au_valid_counts.iter().any(|c| *c > 0),
    };
    let trained = config.mode.tasks();
    if !trained.iter().any(|t| available(*t, &stats)) {
        let task = trained[0];
        return Err(Error::Degenerate { task, reason: "the training set has no valid labels for it".into() });
    }
    let val_stats = compute_stats(val)?;
    for task in config.select_metric().tasks() {
        if !available(*task, &val_stats) {
            return Err(Error::Degenerate {
                task: *task,
                reason: "the validation set cannot score it for model selection".into(),
            });
        }
    }
    if !config.mode.trains(Task::Expr) || stats.n_expr_valid == 0 {
        return Ok(ClassWeights::uniform());
    }
    if config.merge_empty_expr_classes {
        compute_class_weights_merged(&stats)
    } else {
        compute_class_weights(&stats)
    }
}

fn append_log(path: &Path, entry: &EpochLog) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(entry)?).map_err(|e| Error::io(path, e))
}

/// Trains on `train`, scores on `val` after every epoch, and keeps the
/// epoch with the best validation score. Class weights come from `train`.
pub fn train(
    config: &TrainConfig,
    train: &[AffectSample],
    val: &[AffectSample],
    images: &dyn ImageSource,
) -> Result<TrainOutcome> {
    config.validate()?;
    if images.preprocess() != &config.preprocess {
        return Err(Error::invalid("image source preprocessing differs from the training config"));
    }
    let class_weights = preflight(config, train, val)?;
    let mut trainer = Trainer::new(config, class_weights)?;
    let select = config.select_metric();

    let log_path = match &config.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(TRAIN_LOG);
            std::fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
            Some(p)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, f64, Snapshot)> = None;

    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut skipped = SkipCounts::default();
        let mut updates = 0usize;
        let mut out_of_steps = false;
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| trainer.steps() >= m) {
                out_of_steps = true;
                break;
            }
            let labels: Vec<AffectSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let refs: Vec<&str> = labels.iter().map(AffectSample::image_ref).collect();
            let batch = images.batch(&refs, trainer.model().device())?;
            let outcome = trainer.step(&labels, &batch.tensor)?;
            let b = outcome.breakdown;
            for (task, empty) in [(Task::Va, b.va_empty), (Task::Expr, b.expr_empty), (Task::Au, b.au_empty)] {
                if empty && config.mode.trains(task) {
                    match task {
                        Task::Va => skipped.va += 1,
                        Task::Expr => skipped.expr += 1,
                        Task::Au => skipped.au += 1,
                    }
                }
            }
            if !outcome.updated {
                skipped.batches += 1;
                continue;
            }
            updates += 1;
            step_losses.push(b.total);
            sum.l_expr += b.l_expr;
            sum.l_au += b.l_au;
            sum.l_va += b.l_va;
            sum.total += b.total;
        }
        if updates == 0 && out_of_steps {
            break 'epochs;
        }
        let k = updates.max(1) as f64;
        let mean = LossBreakdown {
            l_expr: sum.l_expr / k,
            l_au: sum.l_au / k,
            l_va: sum.l_va / k,
            total: sum.total / k,
            expr_empty: skipped.expr as usize == updates + skipped.batches as usize,
            au_empty: skipped.au as usize == updates + skipped.batches as usize,
            va_empty: skipped.va as usize == updates + skipped.batches as usize,
        };

        let preds = predict(trainer.model(), val, images)?;
        let report = evaluate_records(&preds, val, config.au_threshold)?;
        let value = select
            .value(&report)
            .ok_or_else(|| Error::invalid(format!("validation predictions cannot produce {select:?}")))?;
        let is_best = best.as_ref().is_none_or(|(_, b, _)| value > *b);
        if is_best {
            best = Some((epoch, value, trainer.model().snapshot()?));
            if let Some(dir) = &config.checkpoint_dir {
                trainer.model().save(dir)?;
            }
        }
        let entry = EpochLog {
            epoch,
            steps: updates,
            loss: mean,
            skipped,
            val: report,
            select_metric: select,
            select_value: value,
            best_value: best.as_ref().map_or(value, |b| b.1),
            is_best,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (va {:.4} expr {:.4} au {:.4}), val {select:?} {value:.4}{}",
            mean.total,
            mean.l_va,
            mean.l_expr,
            mean.l_au,
            if is_best { " *" } else { "" }
        );
        if let Some(p) = &log_path {
            append_log(p, &entry)?;
        }
        log.push(entry);
        if out_of_steps || config.max_steps.is_some_and(|m| trainer.steps() >= m) {
            break;
        }
    }

    let (best_epoch, best_value, snapshot) =
        best.ok_or_else(|| Error::invalid("training finished without a completed epoch"))?;
    let model = trainer.into_model();
    model.restore(&snapshot)?;
    Ok(TrainOutcome { model, log, step_losses, best_epoch, best_value, class_weights })
}

/// Inference over `samples` in batches of 64; one record per sample, in order.
pub fn predict(
    model: &AffectModel,
    samples: &[AffectSample],
    images: &dyn ImageSource,
) -> Result<Vec<PredictionRecord>> {
    if images.preprocess() != model.preprocess() {
        return Err(Error::CheckpointMismatch("image preprocessing differs from the checkpoint's".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(DEFAULT_BATCH_SIZE) {
        let refs: Vec<&str> = chunk.iter().map(AffectSample::image_ref).collect();
        let batch = images.batch(&refs, model.device())?;
        out.extend(model.forward(&batch)?);
    }
    Ok(out)
}

/// Deterministic train/validation split of one annotation set.
pub fn split_validation(samples: &[AffectSample], fraction: f64, seed: u64) -> (Vec<AffectSample>, Vec<AffectSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((samples.len() as f64) * fraction).round().max(1.0) as usize;
    let n_val = n_val.min(samples.len().saturating_sub(1));
    let (val, train) = idx.split_at(n_val);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(val))
}
