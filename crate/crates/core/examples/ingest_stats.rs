//! Writes a small synthetic annotation file with some labels hidden behind
//! sentinels, reads it back and prints the statistics and class weights.

use mtl_affect::annotations::{compute_class_weights, compute_stats, load_annotations, ExpressionNames, AU_CODES};
use mtl_affect::synthetic::{generate, SyntheticConfig};

fn main() -> mtl_affect::Result<()> {
    let dir = std::env::temp_dir().join("mtl-affect-ingest");
    let set = generate(&SyntheticConfig {
        n: 200,
        hide_va: 0.3,
        hide_expr: 0.2,
        hide_au: 0.1,
        seed: 3,
        ..SyntheticConfig::default()
    })?;
    let csv = dir.join("annotations.csv");
    set.write(&dir.join("images"), &csv)?;

    let samples = load_annotations(&csv)?;
    let stats = compute_stats(&samples)?;
    println!("{} samples, {} with VA, {} with expression", stats.n_samples, stats.n_va_valid, stats.n_expr_valid);

    let weights = compute_class_weights(&stats)?;
    let names = ExpressionNames::default();
    for (c, name) in names.0.iter().enumerate() {
        println!("  {name:<10} count {:>3}  weight {:.3}", stats.expr_counts[c], weights.get(c));
    }
    for (k, code) in AU_CODES.iter().enumerate() {
        println!("  AU{code:<3} {:>3} positive of {:>3} labeled", stats.au_pos_counts[k], stats.au_valid_counts[k]);
    }
    println!("\nfirst row: {:?}", samples[0]);
    Ok(())
}
