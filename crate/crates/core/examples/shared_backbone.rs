//! Builds single-task and multi-task models on the same backbone, compares
//! parameter counts and runs one forward pass.

use mtl_affect::images::ImageSource;
use mtl_affect::synthetic::{generate, synthetic_preprocess, SyntheticConfig};
use mtl_affect::{build_model, BackboneSpec, Mode, ModelAssembly, Preprocess};

fn main() -> mtl_affect::Result<()> {
    for (backbone, pre) in [
        (BackboneSpec::tiny(64), synthetic_preprocess(32)),
        (BackboneSpec::resnet50(), Preprocess { resolution: 64, ..Preprocess::default() }),
    ] {
        let count = |mode| build_model(&ModelAssembly::new(mode, backbone.clone()), &pre, 0).map(|m| m.param_count());
        let singles = [count(Mode::SingleVa)?, count(Mode::SingleExpr)?, count(Mode::SingleAu)?];
        let multi = count(Mode::Multi)?;
        println!(
            "{:<15} singles {:?} (sum {}), multi {multi}, saved {}",
            backbone.name,
            singles,
            singles.iter().sum::<usize>(),
            singles.iter().sum::<usize>() - multi
        );
    }

    let set = generate(&SyntheticConfig { n: 4, ..SyntheticConfig::default() })?;
    let pre = synthetic_preprocess(32);
    let model = build_model(&ModelAssembly::new(Mode::Multi, BackboneSpec::tiny(64)), &pre, 0)?;
    let refs: Vec<&str> = set.samples.iter().map(|s| s.image_ref()).collect();
    let batch = set.memory_images(&pre).batch(&refs, model.device())?;
    for r in model.forward(&batch)? {
        let e = r.expr_probs.expect("multi");
        println!(
            "{}: va {:?}, expr sums to {:.6}, AU1 p {:.3}",
            r.image_ref,
            r.va.expect("multi"),
            e.iter().sum::<f64>(),
            r.au_probs.expect("multi")[0]
        );
    }
    Ok(())
}
