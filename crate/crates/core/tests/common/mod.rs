//! From-definition oracles and random fixtures shared by integration tests.
#![allow(dead_code)]

use mtl_affect::{AffectSample, AU_COUNT, EXPR_CLASSES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lin's CCC written as `2 rho sx sy / (sx^2 + sy^2 + (mx - my)^2)`.
/// Both sequences constant and equal counts as perfect agreement.
pub fn oracle_ccc(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n).sqrt();
    let den = sx * sx + sy * sy + (mx - my).powi(2);
    if den == 0.0 {
        return 1.0;
    }
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let rho = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n / (sx * sy);
    2.0 * rho * sx * sy / den
}

/// `2 tp / (2 tp + fp + fn)`, zero without true positives.
pub fn oracle_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let mut c = [[0u32; 2]; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        c[usize::from(t)][usize::from(p)] += 1;
    }
    let (tp, fp, fn_) = (c[1][1], c[0][1], c[1][0]);
    if tp == 0 {
        0.0
    } else {
        f64::from(2 * tp) / f64::from(2 * tp + fp + fn_)
    }
}

/// Per-class F1 read off an 8x8 confusion matrix.
pub fn oracle_macro_f1(pred: &[usize], truth: &[usize]) -> [f64; EXPR_CLASSES] {
    let mut m = [[0u32; EXPR_CLASSES]; EXPR_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    std::array::from_fn(|c| {
        let row: u32 = m[c].iter().sum();
        let col: u32 = m.iter().map(|r| r[c]).sum();
        if m[c][c] == 0 {
            0.0
        } else {
            f64::from(2 * m[c][c]) / f64::from(row + col)
        }
    })
}

pub fn oracle_p(cv: f64, ca: f64, f1_expr: &[f64], f1_au: &[f64]) -> f64 {
    (cv + ca) / 2.0 + f1_expr.iter().sum::<f64>() / 8.0 + f1_au.iter().sum::<f64>() / 12.0
}

/// Binary cross-entropy per cell, averaged over labeled cells.
pub fn oracle_bce(logits: &[[f64; AU_COUNT]], labels: &[[Option<bool>; AU_COUNT]]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (z, y) in logits.iter().zip(labels) {
        for k in 0..AU_COUNT {
            if let Some(pos) = y[k] {
                let p = 1.0 / (1.0 + (-z[k]).exp());
                sum -= if pos { p.ln() } else { (1.0 - p).ln() };
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Central differences of `f` around `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error; entries where both sides are below
/// `floor` in magnitude are compared against `floor` instead.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}

pub fn flatten<const N: usize>(rows: &[[f64; N]]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn unflatten<const N: usize>(flat: &[f64]) -> Vec<[f64; N]> {
    flat.chunks(N).map(|c| std::array::from_fn(|k| c[k])).collect()
}

pub fn random_rows<const N: usize>(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; N]> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-scale..scale))).collect()
}

pub fn random_simplex<const N: usize>(rng: &mut ChaCha8Rng) -> [f64; N] {
    let raw: [f64; N] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
    let s: f64 = raw.iter().sum();
    raw.map(|v| v / s)
}

/// A sample whose labels are each present with probability `p_valid`.
pub fn random_sample(rng: &mut ChaCha8Rng, name: String, p_valid: f64) -> AffectSample {
    let va = rng.random_bool(p_valid).then(|| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]);
    let expr = rng.random_bool(p_valid).then(|| rng.random_range(0..EXPR_CLASSES));
    let aus = std::array::from_fn(|_| rng.random_bool(p_valid).then(|| rng.random_bool(0.4)));
    AffectSample::new(name, va, expr, aus).unwrap()
}

/// A sample carrying only sentinels.
pub fn blank_sample(name: String) -> AffectSample {
    AffectSample::new(name, None, None, [None; AU_COUNT]).unwrap()
}
pub mod criteria;
