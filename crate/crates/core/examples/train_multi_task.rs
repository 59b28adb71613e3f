//! Trains the shared-backbone model on a synthetic set and reports how far
//! the loss fell and the composite score on the training images.
//!
//! cargo run --release --example train_multi_task -- [learning_rate] [steps]

use mtl_affect::synthetic::{generate, synthetic_preprocess, SyntheticConfig};
use mtl_affect::{evaluate_records, predict, train, BackboneSpec, Mode, TrainConfig};

fn main() -> mtl_affect::Result<()> {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().map_or(1e-3, |s| s.parse().expect("learning rate"));
    let steps: usize = args.next().map_or(200, |s| s.parse().expect("steps"));

    let set = generate(&SyntheticConfig::default())?;
    let pre = synthetic_preprocess(32);
    let images = set.memory_images(&pre);

    let mut cfg = TrainConfig::new(Mode::Multi, BackboneSpec::tiny(64), pre, steps);
    cfg.learning_rate = lr;
    cfg.max_steps = Some(steps);

    let started = std::time::Instant::now();
    let outcome = train(&cfg, &set.samples, &set.samples, &images)?;
    let first = outcome.step_losses[0];
    let last = *outcome.step_losses.last().expect("steps ran");

    let preds = predict(&outcome.model, &set.samples, &images)?;
    let report = evaluate_records(&preds, &set.samples, cfg.au_threshold)?;
    println!("lr {lr}, {} steps in {:.1?}", outcome.step_losses.len(), started.elapsed());
    let l = outcome.log[0].loss;
    println!("epoch 1 mean loss: va {:.4} expr {:.4} au {:.4}", l.l_va, l.l_expr, l.l_au);
    println!("loss {first:.4} -> {last:.4} ({:.1}% drop)", 100.0 * (1.0 - last / first));
    println!(
        "best epoch {} with P {:.4}; P_va {:.3} P_expr {:.3} P_au {:.3}",
        outcome.best_epoch,
        outcome.best_value,
        report.p_va.unwrap_or(f64::NAN),
        report.p_expr.unwrap_or(f64::NAN),
        report.p_au.unwrap_or(f64::NAN)
    );
    Ok(())
}
