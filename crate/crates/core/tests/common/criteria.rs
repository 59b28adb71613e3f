//! One function per acceptance criterion. Each returns a short summary on
//! success and a reason on failure.
#![allow(dead_code, clippy::needless_range_loop)]

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use candle_core::{Device, Tensor};
use mtl_affect::fusion::{fuse_all, lambda_grid, search_lambda, FinalPrediction, FusionWeights};
use mtl_affect::losses::{au_labels, expr_labels, va_labels, BatchOutputs, TotalLoss};
use mtl_affect::metrics::{f1_binary, macro_f1_expr, ComponentScores, EvalReport};
use mtl_affect::synthetic::{generate, synthetic_preprocess, SyntheticConfig};
use mtl_affect::{
    build_model, ccc, ccc_loss, evaluate, evaluate_records, focal_loss, predict, total_loss, train,
    weighted_cross_entropy, AffectSample, BackboneSpec, ClassWeights, FocalConfig, Mode, ModelAssembly,
    PredictionRecord, Preprocess, Task, TrainConfig, AU_COUNT, EXPR_CLASSES,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn c1_table_arithmetic() -> Outcome {
    let rows = [((29.36, 24.66, 47.67), 101.69), ((36.57, 22.80, 41.02), 100.39)];
    let mut seen = Vec::new();
    for ((va, expr, au), expected) in rows {
        // Build a report whose components are exactly these on the x100 scale.
        let report =
            EvalReport::from_parts(va / 100.0, va / 100.0, [expr / 100.0; EXPR_CLASSES], [au / 100.0; AU_COUNT]);
        let p = report.percent().p_total;
        let direct = ComponentScores::new(va, expr, au).p_total;
        check((p - expected).abs() <= 0.005 && (direct - expected).abs() <= 0.005, || {
            format!("({va}, {expr}, {au}) gave {p:.4} / {direct:.4}, expected {expected}")
        })?;
        seen.push(format!("{p:.2}"));
    }
    Ok(format!("P = {}", seen.join(", ")))
}

/// Samples with at least two VA labels, one expression label and one label
/// per AU.
fn scorable_truth(rng: &mut ChaCha8Rng, n: usize, p_valid: f64) -> Vec<AffectSample> {
    loop {
        let truth: Vec<AffectSample> = (0..n).map(|i| random_sample(rng, format!("s{i}"), p_valid)).collect();
        let va = truth.iter().filter(|s| s.va_valid()).count();
        let expr = truth.iter().filter(|s| s.expr_valid()).count();
        let aus = (0..AU_COUNT).all(|k| truth.iter().any(|s| s.au(k).is_some()));
        if va >= 2 && expr >= 1 && aus {
            return truth;
        }
    }
}

fn random_final(rng: &mut ChaCha8Rng, name: &str, constant_va: Option<f64>) -> FinalPrediction {
    let (valence, arousal) = match constant_va {
        Some(c) => (c, c),
        None => (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
    };
    // Skewed classes so some are never predicted.
    let expr_label = if rng.random_bool(0.3) { 0 } else { rng.random_range(0..EXPR_CLASSES) };
    FinalPrediction {
        image_ref: name.into(),
        valence,
        arousal,
        expr_label,
        au_labels: std::array::from_fn(|_| rng.random_bool(0.35)),
        expr_probs: None,
        au_probs: None,
    }
}

pub fn c2_metric_oracles() -> Outcome {
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    for fixture in 0..1000 {
        let n = rng.random_range(2..=64);
        let truth = scorable_truth(&mut rng, n, 0.85);
        let constant = (fixture % 20 == 0).then_some(0.25);
        let mut preds: Vec<FinalPrediction> =
            truth.iter().map(|s| random_final(&mut rng, s.image_ref(), constant)).collect();
        // Some fixtures predict the truth exactly.
        if fixture % 25 == 1 {
            for (p, s) in preds.iter_mut().zip(&truth) {
                if let Some([v, a]) = s.va() {
                    (p.valence, p.arousal) = (v, a);
                }
            }
        }

        let va_idx: Vec<usize> = (0..n).filter(|&i| truth[i].va_valid()).collect();
        let pick = |f: &dyn Fn(usize) -> f64| va_idx.iter().map(|&i| f(i)).collect::<Vec<f64>>();
        let pv = pick(&|i| preds[i].valence);
        let pa = pick(&|i| preds[i].arousal);
        let tv = pick(&|i| truth[i].va().unwrap()[0]);
        let ta = pick(&|i| truth[i].va().unwrap()[1]);
        let (ov, oa) = (oracle_ccc(&pv, &tv), oracle_ccc(&pa, &ta));

        let (ep, et): (Vec<usize>, Vec<usize>) =
            (0..n).filter_map(|i| truth[i].expression().map(|y| (preds[i].expr_label, y))).unzip();
        let of1_expr = oracle_macro_f1(&ep, &et);

        let of1_au: Vec<f64> = (0..AU_COUNT)
            .map(|k| {
                let (p, t): (Vec<bool>, Vec<bool>) =
                    (0..n).filter_map(|i| truth[i].au(k).map(|y| (preds[i].au_labels[k], y))).unzip();
                let lib = f1_binary(&p, &t).unwrap();
                worst = worst.max((lib - oracle_f1(&p, &t)).abs());
                oracle_f1(&p, &t)
            })
            .collect();
        let op = oracle_p(ov, oa, &of1_expr, &of1_au);

        worst = worst.max((ccc(&pv, &tv).map_err(err)? - ov).abs());
        worst = worst.max((ccc(&pa, &ta).map_err(err)? - oa).abs());
        let lib_macro = macro_f1_expr(&ep, &et).map_err(err)?;
        for c in 0..EXPR_CLASSES {
            worst = worst.max((lib_macro.per_class[c] - of1_expr[c]).abs());
        }

        preds.shuffle(&mut rng);
        let report = evaluate(&preds, &truth).map_err(err)?;
        worst = worst.max((report.ccc_valence - ov).abs());
        worst = worst.max((report.ccc_arousal - oa).abs());
        worst = worst.max((report.p_total - op).abs());
        for k in 0..AU_COUNT {
            worst = worst.max((report.f1_au[k] - of1_au[k]).abs());
        }
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e} exceeds 1e-12"))?;
    Ok(format!("1000 fixtures, max deviation {worst:.1e}"))
}

fn labels_with_holes(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<usize>> {
    loop {
        let l: Vec<Option<usize>> =
            (0..n).map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..EXPR_CLASSES))).collect();
        if l.iter().any(Option::is_some) {
            return l;
        }
    }
}

fn va_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Option<[f64; 2]>> {
    loop {
        let t: Vec<Option<[f64; 2]>> = (0..n)
            .map(|_| rng.random_bool(0.8).then(|| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]))
            .collect();
        if t.iter().flatten().count() >= 2 {
            return t;
        }
    }
}

fn au_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<[Option<bool>; AU_COUNT]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.8).then(|| rng.random_bool(0.4)))).collect()
}

pub fn c3_gradient_checks() -> Outcome {
    const H: f64 = 1e-4;
    const TOL: f64 = 1e-3;
    const FLOOR: f64 = 1e-6;
    let mut rng = rng(3);
    let mut worst = [0.0f64; 5];
    for _ in 0..20 {
        let n = 8;
        let weights = ClassWeights::new(std::array::from_fn(|_| rng.random_range(0.5..8.0))).map_err(err)?;
        let logits = random_rows::<EXPR_CLASSES>(&mut rng, n, 3.0);
        let labels = labels_with_holes(&mut rng, n);
        let ce = |flat: &[f64]| weighted_cross_entropy(&unflatten(flat), &labels, &weights).unwrap().value;
        let analytic = flatten(&weighted_cross_entropy(&logits, &labels, &weights).map_err(err)?.grad);
        worst[0] = worst[0].max(max_rel_err(&analytic, &numeric_grad(&flatten(&logits), H, ce), FLOOR));

        let au_logits = random_rows::<AU_COUNT>(&mut rng, n, 3.0);
        let au = au_targets(&mut rng, n);
        for (g, gamma) in [0.0, 1.0, 2.0].into_iter().enumerate() {
            let cfg = FocalConfig::new(gamma).map_err(err)?;
            let fl = |flat: &[f64]| focal_loss(&unflatten(flat), &au, &cfg).unwrap().value;
            let analytic = flatten(&focal_loss(&au_logits, &au, &cfg).map_err(err)?.grad);
            worst[1 + g] = worst[1 + g].max(max_rel_err(&analytic, &numeric_grad(&flatten(&au_logits), H, fl), FLOOR));
        }

        let va = random_rows::<2>(&mut rng, n, 0.9);
        let targets = va_targets(&mut rng, n);
        let cl = |flat: &[f64]| ccc_loss(&unflatten(flat), &targets).unwrap().value;
        let analytic = flatten(&ccc_loss(&va, &targets).map_err(err)?.grad);
        worst[4] = worst[4].max(max_rel_err(&analytic, &numeric_grad(&flatten(&va), H, cl), FLOOR));
    }
    let names = ["ce", "focal g0", "focal g1", "focal g2", "ccc"];
    for (name, w) in names.iter().zip(worst) {
        check(w <= TOL, || format!("{name}: relative error {w:e} exceeds {TOL:e}"))?;
    }
    Ok(format!(
        "20 batches of 8, max relative error {}",
        names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

/// Inserts `extra` rows at random positions; returns the new sequence and
/// the original index of every kept row (None for inserted rows).
fn inject<T: Clone>(rng: &mut ChaCha8Rng, base: &[T], extra: Vec<T>) -> (Vec<T>, Vec<Option<usize>>) {
    let mut tagged: Vec<(Option<usize>, T)> = base.iter().cloned().enumerate().map(|(i, t)| (Some(i), t)).collect();
    for e in extra {
        let at = rng.random_range(0..=tagged.len());
        tagged.insert(at, (None, e));
    }
    let origin = tagged.iter().map(|(o, _)| *o).collect();
    (tagged.into_iter().map(|(_, t)| t).collect(), origin)
}

fn grads_match<const N: usize>(base: &[[f64; N]], padded: &[[f64; N]], origin: &[Option<usize>]) -> bool {
    origin.iter().zip(padded).all(|(o, g)| match o {
        Some(i) => base[*i] == *g,
        None => g.iter().all(|v| *v == 0.0),
    })
}

pub fn c4_masking_equivalence() -> Outcome {
    let mut rng = rng(4);
    let cfg = FocalConfig::default();
    let weights = ClassWeights::new(std::array::from_fn(|c| 1.0 + c as f64)).map_err(err)?;
    let mut checked = 0usize;
    for round in 0..200 {
        let n = rng.random_range(2..=24);
        let truth = scorable_truth(&mut rng, n, 0.85);
        let outputs = BatchOutputs {
            va: random_rows(&mut rng, n, 0.9),
            expr_logits: random_rows(&mut rng, n, 3.0),
            au_logits: random_rows(&mut rng, n, 3.0),
        };
        let k = rng.random_range(1..=8);
        let blanks: Vec<AffectSample> = (0..k).map(|j| blank_sample(format!("blank{round}_{j}"))).collect();
        let extra_out: Vec<([f64; 2], [f64; EXPR_CLASSES], [f64; AU_COUNT])> = (0..k)
            .map(|_| {
                (random_rows(&mut rng, 1, 0.9)[0], random_rows(&mut rng, 1, 9.0)[0], random_rows(&mut rng, 1, 9.0)[0])
            })
            .collect();
        let zipped: Vec<_> = truth
            .iter()
            .cloned()
            .zip((0..n).map(|i| (outputs.va[i], outputs.expr_logits[i], outputs.au_logits[i])))
            .collect();
        let extra: Vec<_> = blanks.iter().cloned().zip(extra_out).collect();
        let (padded, origin) = inject(&mut rng, &zipped, extra);
        let p_truth: Vec<AffectSample> = padded.iter().map(|(s, _)| s.clone()).collect();
        let p_out = BatchOutputs {
            va: padded.iter().map(|(_, o)| o.0).collect(),
            expr_logits: padded.iter().map(|(_, o)| o.1).collect(),
            au_logits: padded.iter().map(|(_, o)| o.2).collect(),
        };

        let a = weighted_cross_entropy(&outputs.expr_logits, &expr_labels(&truth), &weights).map_err(err)?;
        let b = weighted_cross_entropy(&p_out.expr_logits, &expr_labels(&p_truth), &weights).map_err(err)?;
        check(a.value == b.value && grads_match(&a.grad, &b.grad, &origin), || format!("ce differs in round {round}"))?;

        let a = focal_loss(&outputs.au_logits, &au_labels(&truth), &cfg).map_err(err)?;
        let b = focal_loss(&p_out.au_logits, &au_labels(&p_truth), &cfg).map_err(err)?;
        check(a.value == b.value && grads_match(&a.grad, &b.grad, &origin), || {
            format!("focal differs in round {round}")
        })?;

        let a = ccc_loss(&outputs.va, &va_labels(&truth)).map_err(err)?;
        let b = ccc_loss(&p_out.va, &va_labels(&p_truth)).map_err(err)?;
        check(a.value == b.value && grads_match(&a.grad, &b.grad, &origin), || {
            format!("ccc differs in round {round}")
        })?;

        let a: TotalLoss = total_loss(&outputs, &truth, &weights, &cfg).map_err(err)?;
        let b: TotalLoss = total_loss(&p_out, &p_truth, &weights, &cfg).map_err(err)?;
        check(a.breakdown == b.breakdown, || format!("total differs in round {round}"))?;

        // Metrics: decided predictions and probability records.
        let preds: Vec<FinalPrediction> = truth.iter().map(|s| random_final(&mut rng, s.image_ref(), None)).collect();
        let mut p_preds = preds.clone();
        p_preds.extend(blanks.iter().map(|s| random_final(&mut rng, s.image_ref(), None)));
        check(evaluate(&preds, &truth).map_err(err)? == evaluate(&p_preds, &p_truth).map_err(err)?, || {
            format!("evaluate differs in round {round}")
        })?;

        let records: Vec<PredictionRecord> = truth.iter().map(|s| random_record(&mut rng, s.image_ref())).collect();
        let mut p_records = records.clone();
        p_records.extend(blanks.iter().map(|s| random_record(&mut rng, s.image_ref())));
        p_records.shuffle(&mut rng);
        check(
            evaluate_records(&records, &truth, 0.5).map_err(err)?
                == evaluate_records(&p_records, &p_truth, 0.5).map_err(err)?,
            || format!("evaluate_records differs in round {round}"),
        )?;
        checked += 1;
    }
    Ok(format!("{checked} batches: 3 task losses, total loss and 2 evaluators unchanged"))
}

pub fn c5_focal_identity() -> Outcome {
    let mut rng = rng(5);
    let cfg = FocalConfig::new(0.0).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=32);
        let logits = random_rows::<AU_COUNT>(&mut rng, n, 8.0);
        let labels = au_targets(&mut rng, n);
        if labels.iter().flatten().flatten().count() == 0 {
            continue;
        }
        let lib = focal_loss(&logits, &labels, &cfg).map_err(err)?.value;
        worst = worst.max((lib - oracle_bce(&logits, &labels)).abs());
    }
    check(worst <= 1e-10, || format!("max deviation {worst:e} exceeds 1e-10"))?;
    Ok(format!("50 batches, max deviation {worst:.1e}"))
}

pub fn random_record(rng: &mut ChaCha8Rng, name: &str) -> PredictionRecord {
    PredictionRecord {
        image_ref: name.into(),
        va: Some([rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]),
        expr_probs: Some(random_simplex(rng)),
        au_probs: Some(std::array::from_fn(|_| rng.random_range(0.0..1.0))),
    }
}

fn oracle_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Exhaustive search over `k / 10`, written against the oracles. All three
/// slices must be in the same sample order.
fn oracle_search(
    single: &[PredictionRecord],
    multi: &[PredictionRecord],
    truth: &[AffectSample],
) -> ([usize; 3], Vec<[f64; 3]>) {
    let blend = |l: f64, a: f64, b: f64| l * a + (1.0 - l) * b;
    let mut table = Vec::new();
    for k in 0..=10 {
        let l = k as f64 / 10.0;
        let va_idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i].va_valid()).collect();
        let dim = |d: usize| {
            let p: Vec<f64> =
                va_idx.iter().map(|&i| blend(l, single[i].va.unwrap()[d], multi[i].va.unwrap()[d])).collect();
            let t: Vec<f64> = va_idx.iter().map(|&i| truth[i].va().unwrap()[d]).collect();
            oracle_ccc(&p, &t)
        };
        let va = 0.5 * (dim(0) + dim(1));

        let (ep, et): (Vec<usize>, Vec<usize>) = (0..truth.len())
            .filter_map(|i| {
                truth[i].expression().map(|y| {
                    let s = single[i].expr_probs.unwrap();
                    let m = multi[i].expr_probs.unwrap();
                    let f: Vec<f64> = (0..EXPR_CLASSES).map(|c| blend(l, s[c], m[c])).collect();
                    (oracle_argmax(&f), y)
                })
            })
            .unzip();
        let expr = oracle_macro_f1(&ep, &et).iter().sum::<f64>() / 8.0;

        let au = (0..AU_COUNT)
            .map(|a| {
                let (p, t): (Vec<bool>, Vec<bool>) = (0..truth.len())
                    .filter_map(|i| {
                        truth[i].au(a).map(|y| {
                            (blend(l, single[i].au_probs.unwrap()[a], multi[i].au_probs.unwrap()[a]) >= 0.5, y)
                        })
                    })
                    .unzip();
                oracle_f1(&p, &t)
            })
            .sum::<f64>()
            / 12.0;
        table.push([va, expr, au]);
    }
    let best = std::array::from_fn(|task| {
        let mut best = 0usize;
        for k in 1..=10 {
            let (s, b) = (table[k][task], table[best][task]);
            let dk = (2 * k as i64 - 10).abs();
            let db = (2 * best as i64 - 10).abs();
            if s > b || (s == b && (dk < db || (dk == db && k < best))) {
                best = k;
            }
        }
        best
    });
    (best, table)
}

pub fn c6_fusion_properties() -> Outcome {
    let mut rng = rng(6);
    let mut worst_table: f64 = 0.0;
    for round in 0..30 {
        let n = rng.random_range(10..=60);
        let truth = scorable_truth(&mut rng, n, 0.9);
        let single: Vec<PredictionRecord> = truth.iter().map(|s| random_record(&mut rng, s.image_ref())).collect();
        let mut multi: Vec<PredictionRecord> = truth.iter().map(|s| random_record(&mut rng, s.image_ref())).collect();
        multi.shuffle(&mut rng);

        let decided = |records: &[PredictionRecord]| -> Result<Vec<FinalPrediction>, String> {
            let mut out: Vec<FinalPrediction> =
                records.iter().map(|r| FinalPrediction::from_record(r, 0.5)).collect::<Result<_, _>>().map_err(err)?;
            out.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
            Ok(out)
        };
        let sorted = |mut v: Vec<FinalPrediction>| {
            v.sort_by(|a, b| a.image_ref.cmp(&b.image_ref));
            v
        };
        let one = sorted(fuse_all(&single, &multi, &FusionWeights::uniform(1.0).map_err(err)?, 0.5).map_err(err)?);
        check(one == decided(&single)?, || format!("lambda=1 is not the single-task decision (round {round})"))?;
        let zero = sorted(fuse_all(&single, &multi, &FusionWeights::uniform(0.0).map_err(err)?, 0.5).map_err(err)?);
        check(zero == decided(&multi)?, || format!("lambda=0 is not the multi-task decision (round {round})"))?;

        let w =
            FusionWeights::new(rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0))
                .map_err(err)?;
        let fused = fuse_all(&single, &multi, &w, 0.5).map_err(err)?;
        for (f, s) in fused.iter().zip(&single) {
            let m = multi.iter().find(|m| m.image_ref == s.image_ref).unwrap();
            let within = |x: f64, a: f64, b: f64| a.min(b) <= x && x <= a.max(b);
            let (sv, mv) = (s.va.unwrap(), m.va.unwrap());
            let ok = within(f.valence, sv[0], mv[0])
                && within(f.arousal, sv[1], mv[1])
                && (0..EXPR_CLASSES)
                    .all(|c| within(f.expr_probs.unwrap()[c], s.expr_probs.unwrap()[c], m.expr_probs.unwrap()[c]))
                && (0..AU_COUNT)
                    .all(|k| within(f.au_probs.unwrap()[k], s.au_probs.unwrap()[k], m.au_probs.unwrap()[k]));
            check(ok, || format!("convexity violated for {} (round {round})", f.image_ref))?;
        }

        let search = search_lambda(&single, &multi, &truth, 0.1, 0.5).map_err(err)?;
        let multi_by_truth: Vec<PredictionRecord> =
            truth.iter().map(|t| multi.iter().find(|m| m.image_ref == t.image_ref()).unwrap().clone()).collect();
        let (best, table) = oracle_search(&single, &multi_by_truth, &truth);
        let grid = lambda_grid(0.1).map_err(err)?;
        for (row, o) in search.table.iter().zip(&table) {
            for (lib, orc) in [row.va, row.expr, row.au].iter().zip(o) {
                worst_table = worst_table.max((lib - orc).abs());
            }
        }
        let chosen = [search.weights.lambda_va, search.weights.lambda_expr, search.weights.lambda_au];
        for (task, (c, b)) in Task::ALL.iter().zip(chosen.iter().zip(best)) {
            check(*c == grid[b], || format!("{task}: search chose {c}, oracle {} (round {round})", grid[b]))?;
        }
    }
    check(worst_table <= 1e-12, || format!("search table deviates by {worst_table:e}"))?;
    Ok(format!("30 prediction sets, identities exact, search table within {worst_table:.1e}"))
}

pub const OVERFIT_LR: f64 = 5e-5;
pub const OVERFIT_STEPS: usize = 200;

pub fn c7_overfit() -> Outcome {
    let started = Instant::now();
    let set = generate(&SyntheticConfig::default()).map_err(err)?;
    let pre = synthetic_preprocess(32);
    let images = set.memory_images(&pre);
    let mut cfg = TrainConfig::new(Mode::Multi, BackboneSpec::tiny(64), pre, OVERFIT_STEPS);
    cfg.learning_rate = OVERFIT_LR;
    cfg.max_steps = Some(OVERFIT_STEPS);
    let outcome = train(&cfg, &set.samples, &set.samples, &images).map_err(err)?;
    let steps = outcome.step_losses.len();
    check(steps == OVERFIT_STEPS, || format!("ran {steps} steps"))?;
    let first = outcome.step_losses[0];
    let last = outcome.step_losses[steps - 1];
    let drop = 1.0 - last / first;
    let preds = predict(&outcome.model, &set.samples, &images).map_err(err)?;
    let p = evaluate_records(&preds, &set.samples, cfg.au_threshold).map_err(err)?.p_total.ok_or("no P")?;
    let summary =
        format!("loss {first:.3} -> {last:.3} ({:.1}% drop), P {p:.3}, {:.0?}", 100.0 * drop, started.elapsed());
    check(drop >= 0.5 && p >= 2.0, || format!("{summary}: needs >= 50% drop and P >= 2.0"))?;
    Ok(summary)
}

pub fn c8_structure() -> Outcome {
    let mut lines = Vec::new();
    for (backbone, res) in [(BackboneSpec::tiny(64), 32), (BackboneSpec::resnet50(), 32)] {
        let pre = Preprocess { resolution: res, ..Preprocess::default() };
        let count = |mode| -> Result<usize, String> {
            Ok(build_model(&ModelAssembly::new(mode, backbone.clone()), &pre, 0).map_err(err)?.param_count())
        };
        let multi = count(Mode::Multi)?;
        let singles = count(Mode::SingleVa)? + count(Mode::SingleExpr)? + count(Mode::SingleAu)?;
        check(multi < singles, || format!("{}: multi {multi} >= singles {singles}", backbone.name))?;

        let model = build_model(&ModelAssembly::new(Mode::Multi, backbone.clone()), &pre, 0).map_err(err)?;
        for n in [1usize, 64] {
            let x = Tensor::zeros((n, 3, res, res), candle_core::DType::F32, &Device::Cpu).map_err(err)?;
            let out = model.forward_t(&x, false).map_err(err)?;
            for task in Task::ALL {
                let t = out.get(task).ok_or_else(|| format!("no {task} output"))?;
                check(t.dims() == [n, task.out_dim()], || format!("{task} output {:?} for batch {n}", t.dims()))?;
            }
        }
        lines.push(format!("{} multi {multi} < singles {singles}", backbone.name));
    }
    Ok(format!("{}; shapes ok for batch 1 and 64", lines.join("; ")))
}

fn run_cli(bin: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin).args(args).env("RUST_LOG", "warn").output().map_err(err)?;
    if !out.status.success() {
        return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

pub const WALKTHROUGH_CONFIG: &str = r#"max_epochs = 8
batch_size = 16
learning_rate = 0.001
seed = 1
val_fraction = 0.25

[backbone]
name = "tiny"
embedding_dim = 32

[preprocess]
resolution = 32
mean = [0.5, 0.5, 0.5]
std = [0.25, 0.25, 0.25]
"#;

pub fn c9_cli_walkthrough(bin: &Path) -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let (images, ann, config) = (p("images"), p("annotations.csv"), p("train.toml"));
    std::fs::write(&config, WALKTHROUGH_CONFIG).map_err(err)?;

    run_cli(bin, &["synth", "--n", "64", "--images-dir", &images, "--annotations", &ann])?;
    run_cli(bin, &["ingest", "--annotations", &ann, "--stats-out", &p("stats.toml")])?;
    let stats: toml::Table = std::fs::read_to_string(p("stats.toml")).map_err(err)?.parse().map_err(err)?;
    check(stats.get("n_samples").and_then(|v| v.as_integer()) == Some(64), || {
        "stats report lacks n_samples = 64".into()
    })?;

    let common = |out: &str| {
        vec![
            "--config".to_string(),
            config.clone(),
            "--annotations".into(),
            ann.clone(),
            "--images-root".into(),
            images.clone(),
            "--out".into(),
            p(out),
        ]
    };
    for task in ["va", "expr", "au"] {
        let mut args = vec!["train-single".to_string(), "--task".into(), task.into()];
        args.extend(common(&format!("ckpt_{task}")));
        run_cli(bin, &args.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    let mut args = vec!["train-multi".to_string()];
    args.extend(common("ckpt_multi"));
    run_cli(bin, &args.iter().map(String::as_str).collect::<Vec<_>>())?;
    let log = std::fs::read_to_string(dir.path().join("ckpt_multi/train_log.jsonl")).map_err(err)?;
    check(log.lines().count() == 8, || format!("train log has {} lines", log.lines().count()))?;

    run_cli(
        bin,
        &[
            "predict",
            "--checkpoint",
            &p("ckpt_va"),
            "--checkpoint",
            &p("ckpt_expr"),
            "--checkpoint",
            &p("ckpt_au"),
            "--annotations",
            &ann,
            "--images-root",
            &images,
            "--out",
            &p("single.csv"),
        ],
    )?;
    run_cli(
        bin,
        &[
            "predict",
            "--checkpoint",
            &p("ckpt_multi"),
            "--annotations",
            &ann,
            "--images-root",
            &images,
            "--out",
            &p("multi.csv"),
        ],
    )?;
    run_cli(
        bin,
        &[
            "fuse",
            "--single",
            &p("single.csv"),
            "--multi",
            &p("multi.csv"),
            "--lambda-va",
            "0.4",
            "--lambda-expr",
            "0.6",
            "--lambda-au",
            "0.6",
            "--out",
            &p("final.csv"),
        ],
    )?;
    run_cli(bin, &["evaluate", "--preds", &p("final.csv"), "--gt", &ann, "--out", &p("report.json")])?;

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("report.json")).map_err(err)?).map_err(err)?;
    let total = report["p_total"].as_f64().ok_or("report has no p_total")?;
    let parts: f64 = ["p_va", "p_expr", "p_au"].iter().filter_map(|k| report[k].as_f64()).sum();
    check((0.0..=3.0).contains(&total) && (parts - total).abs() < 1e-12, || format!("inconsistent report: {report}"))?;
    check(report["f1_expr"].as_array().map(Vec::len) == Some(8), || "f1_expr must have 8 entries".into())?;
    check(report["f1_au"].as_array().map(Vec::len) == Some(12), || "f1_au must have 12 entries".into())?;
    Ok(format!("8 commands, fused P {total:.3}, {:.0?}", started.elapsed()))
}
