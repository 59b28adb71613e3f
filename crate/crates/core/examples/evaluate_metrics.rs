//! Scores hand-made predictions and shows the composite score on the
//! percent scale used in result tables.

use mtl_affect::fusion::FinalPrediction;
use mtl_affect::metrics::{f1_binary, macro_f1_expr, ComponentScores};
use mtl_affect::{ccc, evaluate, AffectSample};

fn main() -> mtl_affect::Result<()> {
    let truth_v = [0.1, 0.4, -0.3, 0.8];
    let pred_v = [0.0, 0.5, -0.1, 0.6];
    println!("CCC {:.4}", ccc(&pred_v, &truth_v)?);
    println!("F1 {:.4}", f1_binary(&[true, true, false, false], &[true, false, true, false])?);
    let m = macro_f1_expr(&[0, 1, 2, 2, 7], &[0, 1, 2, 3, 7])?;
    println!("macro F1 {:.4} per class {:?}", m.mean, m.per_class);

    let truth: Vec<AffectSample> = (0..4)
        .map(|i| {
            AffectSample::new(format!("{i}.png"), Some([truth_v[i], -truth_v[i]]), Some(i), [Some(i % 2 == 0); 12])
        })
        .collect::<Result<_, _>>()?;
    let preds: Vec<FinalPrediction> = (0..4)
        .map(|i| FinalPrediction {
            image_ref: format!("{i}.png"),
            valence: pred_v[i],
            arousal: -pred_v[i],
            expr_label: if i == 3 { 0 } else { i },
            au_labels: [i != 1; 12],
            expr_probs: None,
            au_probs: None,
        })
        .collect();
    let report = evaluate(&preds, &truth)?;
    println!("{}", serde_json::to_string_pretty(&report.to_json())?);

    let row = ComponentScores::new(29.36, 24.66, 47.67);
    println!("table row: {:.2} + {:.2} + {:.2} = {:.2}", row.p_va, row.p_expr, row.p_au, row.p_total);
    Ok(())
}
