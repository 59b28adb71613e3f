//! Multi-task facial affect recognition: valence/arousal regression,
//! expression classification and action-unit detection from one shared
//! backbone, plus late fusion of single- and multi-task predictions and the
//! challenge metrics used to score them.
//!
//! ```no_run
//! use mtl_affect::{load_annotations, train, DiskImages, Mode, TrainConfig, BackboneSpec, Preprocess};
//!
//! let train_set = load_annotations("train.csv")?;
//! let val_set = load_annotations("val.csv")?;
//! let cfg = TrainConfig::new(Mode::Multi, BackboneSpec::resnet50(), Preprocess::default(), 10);
//! let images = DiskImages::new("images/", cfg.preprocess.clone())?;
//! let outcome = train(&cfg, &train_set, &val_set, &images)?;
//! println!("best P = {:.3} at epoch {}", outcome.best_value, outcome.best_epoch);
//! # Ok::<(), mtl_affect::Error>(())
//! ```

pub mod annotations;
pub mod error;
pub mod fusion;
pub mod images;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod records;
pub mod synthetic;
pub mod training;

pub use annotations::{
    compute_class_weights, compute_stats, load_annotations, write_annotations, AffectSample, ClassWeights,
    DatasetStats, AU_CODES, AU_COUNT, EXPR_CLASSES,
};
pub use error::{Error, Result};
pub use fusion::{fuse, fuse_all, search_lambda, FinalPrediction, FusionWeights, LambdaSearch};
pub use images::{DiskImages, ImageBatch, ImageSource, MemoryImages, Preprocess};
pub use losses::{ccc, ccc_loss, focal_loss, total_loss, weighted_cross_entropy, FocalConfig, LossBreakdown};
pub use metrics::{evaluate, evaluate_records, EvalReport, PartialReport};
pub use models::{build_model, AffectModel, BackboneSpec, Mode, ModelAssembly, Task};
pub use records::PredictionRecord;
pub use training::{predict, train, TrainConfig, TrainOutcome, Trainer};
