//! Evaluates the three task losses on a toy batch, including masked rows,
//! and the total objective.

use mtl_affect::losses::{au_labels, expr_labels, va_labels, BatchOutputs};
use mtl_affect::{ccc_loss, focal_loss, total_loss, weighted_cross_entropy, AffectSample, ClassWeights, FocalConfig};

fn main() -> mtl_affect::Result<()> {
    let labels = vec![
        AffectSample::new("a.png", Some([0.5, -0.2]), Some(4), [Some(true); 12])?,
        AffectSample::new("b.png", Some([-0.3, 0.6]), Some(0), [Some(false); 12])?,
        AffectSample::new("c.png", Some([0.1, 0.1]), None, [None; 12])?,
        AffectSample::new("d.png", None, Some(4), [Some(true); 12])?,
    ];
    let outputs = BatchOutputs {
        va: vec![[0.4, -0.1], [-0.2, 0.5], [0.0, 0.2], [0.9, 0.9]],
        expr_logits: vec![[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]; 4],
        au_logits: vec![[1.0; 12], [-1.0; 12], [0.0; 12], [0.5; 12]],
    };
    let weights = ClassWeights::new([8.0, 8.0, 8.0, 8.0, 2.0, 8.0, 8.0, 8.0])?;

    let ce = weighted_cross_entropy(&outputs.expr_logits, &expr_labels(&labels), &weights)?;
    println!("weighted CE {:.4} over {} samples", ce.value, ce.n_valid);
    for gamma in [0.0, 1.0, 2.0] {
        let fl = focal_loss(&outputs.au_logits, &au_labels(&labels), &FocalConfig::new(gamma)?)?;
        println!("focal (gamma {gamma}) {:.4} over {} cells", fl.value, fl.n_valid);
    }
    let cl = ccc_loss(&outputs.va, &va_labels(&labels))?;
    println!("1 - CCC {:.4} over {} samples; d/d(d.png) = {:?}", cl.value, cl.n_valid, cl.grad[3]);

    let total = total_loss(&outputs, &labels, &weights, &FocalConfig::default())?;
    println!("{:#?}", total.breakdown);
    Ok(())
}
