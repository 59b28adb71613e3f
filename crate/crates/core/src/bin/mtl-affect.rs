use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mtl_affect::fusion::DEFAULT_AU_THRESHOLD;
use mtl_affect::models::{Mode, Task};
use mtl_affect::pipeline::{self, FuseJob, TrainJob};
use mtl_affect::synthetic::{generate, SyntheticConfig};
use mtl_affect::{FusionWeights, TrainConfig};

#[derive(Parser)]
#[command(name = "mtl-affect", version, about = "Multi-task facial affect recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled image set.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        images_dir: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Validate annotations and write dataset statistics.
    Ingest {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        stats_out: PathBuf,
    },
    /// Train one single-task model.
    TrainSingle {
        #[arg(long)]
        task: Task,
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Train the shared-backbone multi-task model.
    TrainMulti {
        #[command(flatten)]
        common: TrainArgs,
    },
    /// Run checkpoints over annotated images and write a predictions CSV.
    Predict {
        /// Repeat to merge single-task checkpoints into one file.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Late fusion of single- and multi-task predictions.
    Fuse {
        #[arg(long)]
        single: PathBuf,
        #[arg(long)]
        multi: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        lambda_va: f64,
        #[arg(long, default_value_t = 0.6)]
        lambda_expr: f64,
        #[arg(long, default_value_t = 0.6)]
        lambda_au: f64,
        #[arg(long, default_value_t = DEFAULT_AU_THRESHOLD)]
        au_threshold: f64,
        #[arg(long)]
        out: PathBuf,
        /// Pick lambdas by grid search against `--gt`.
        #[arg(long, requires = "gt")]
        search: bool,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        /// Per-lambda table; defaults to `<out>.lambda.csv`.
        #[arg(long)]
        table_out: Option<PathBuf>,
    },
    /// Score predictions and write a JSON report.
    Evaluate {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_AU_THRESHOLD)]
        au_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML (or JSON) training config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    val_annotations: Option<PathBuf>,
    #[arg(long)]
    images_root: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Give empty expression classes the weight of class 7 instead of failing.
    #[arg(long)]
    merge_empty_expr: bool,
}

fn train(mode: Mode, args: TrainArgs) -> mtl_affect::Result<()> {
    let mut config = TrainConfig::from_file(&args.config)?;
    config.mode = mode;
    config.merge_empty_expr_classes |= args.merge_empty_expr;
    let outcome = pipeline::run_training(TrainJob {
        config,
        annotations: args.annotations,
        val_annotations: args.val_annotations,
        images_root: args.images_root,
        out: args.out.clone(),
    })?;
    println!(
        "{mode}: best {:.4} at epoch {}/{}, checkpoint in {}",
        outcome.best_value,
        outcome.best_epoch,
        outcome.log.len(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> mtl_affect::Result<()> {
    match cli.command {
        Command::Synth { n, resolution, seed, images_dir, annotations } => {
            let set = generate(&SyntheticConfig { n, resolution, seed, ..SyntheticConfig::default() })?;
            set.write(&images_dir, &annotations)?;
            println!("wrote {} samples", set.len());
        }
        Command::Ingest { annotations, stats_out } => {
            let stats = pipeline::ingest(&annotations, &stats_out)?;
            println!("{} samples, {} va-valid, {} expr-valid", stats.n_samples, stats.n_va_valid, stats.n_expr_valid);
        }
        Command::TrainSingle { task, common } => train(Mode::single(task), common)?,
        Command::TrainMulti { common } => train(Mode::Multi, common)?,
        Command::Predict { checkpoints, annotations, images_root, out } => {
            let n = pipeline::predict_to_file(&checkpoints, &annotations, &images_root, &out)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Fuse {
            single,
            multi,
            lambda_va,
            lambda_expr,
            lambda_au,
            au_threshold,
            out,
            search,
            gt,
            step,
            table_out,
        } => {
            let search = match (search, gt) {
                (true, Some(gt)) => {
                    let table = table_out.unwrap_or_else(|| out.with_extension("lambda.csv"));
                    Some((gt, step, table))
                }
                _ => None,
            };
            let job = FuseJob {
                single,
                multi,
                weights: FusionWeights::new(lambda_va, lambda_expr, lambda_au)?,
                au_threshold,
                out,
                search,
            };
            let (w, _, fused) = pipeline::fuse_files(&job)?;
            println!(
                "fused {} samples with lambda va={} expr={} au={}",
                fused.len(),
                w.lambda_va,
                w.lambda_expr,
                w.lambda_au
            );
        }
        Command::Evaluate { preds, gt, au_threshold, out } => {
            let report = pipeline::evaluate_file(&preds, &gt, au_threshold)?;
            pipeline::write_json(&out, &report)?;
            if let Some(p) = report.get("p_total").and_then(|v| v.as_f64()) {
                println!("P = {p:.4}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
