//! Trains a single-task expression model and a multi-task model on
//! synthetic data, fuses their predictions and searches lambda.

use mtl_affect::fusion::{fuse_all, search_lambda, FusionWeights};
use mtl_affect::synthetic::{generate, synthetic_preprocess, SyntheticConfig};
use mtl_affect::{evaluate, predict, train, BackboneSpec, Mode, Task, TrainConfig};

fn main() -> mtl_affect::Result<()> {
    let set = generate(&SyntheticConfig { n: 96, seed: 11, ..SyntheticConfig::default() })?;
    let (fit, held_out) = set.samples.split_at(64);
    let pre = synthetic_preprocess(32);
    let images = set.memory_images(&pre);

    let run = |mode: Mode| {
        let mut cfg = TrainConfig::new(mode, BackboneSpec::tiny(32), pre.clone(), 6);
        cfg.batch_size = 16;
        cfg.learning_rate = 1e-3;
        train(&cfg, fit, held_out, &images)
    };
    // Single-task records for every task, merged into one set.
    let mut single = predict(&run(Mode::single(Task::Va))?.model, held_out, &images)?;
    for task in [Task::Expr, Task::Au] {
        let other = predict(&run(Mode::single(task))?.model, held_out, &images)?;
        for (a, b) in single.iter_mut().zip(&other) {
            a.merge(b)?;
        }
    }
    let multi = predict(&run(Mode::Multi)?.model, held_out, &images)?;

    for (label, w) in [
        ("single only", FusionWeights::uniform(1.0)?),
        ("multi only", FusionWeights::uniform(0.0)?),
        ("default 0.4/0.6/0.6", FusionWeights::default()),
    ] {
        let report = evaluate(&fuse_all(&single, &multi, &w, 0.5)?, held_out)?;
        println!("{label:<20} P {:.4}", report.p_total);
    }

    // Searching on the evaluation split itself is optimistic; shown for illustration.
    let search = search_lambda(&single, &multi, held_out, 0.1, 0.5)?;
    println!("searched lambdas: {:?}", search.weights);
    for row in &search.table {
        println!("  lambda {:.1}: va {:.3} expr {:.3} au {:.3}", row.lambda, row.va, row.expr, row.au);
    }
    Ok(())
}
