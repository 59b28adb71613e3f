//! Annotation files, validity masks and label statistics.
//!
//! Sentinels (`-5` for valence/arousal, `-1` for expression and AUs) are
//! turned into validity flags when a file is read. Nothing downstream of
//! [`AffectSample`] looks at the raw sentinel values.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of expression classes.
pub const EXPR_CLASSES: usize = 8;
/// Number of annotated action units.
pub const AU_COUNT: usize = 12;
/// FACS codes of the annotated AUs, in column order.
pub const AU_CODES: [u8; AU_COUNT] = [1, 2, 4, 6, 7, 10, 12, 15, 23, 24, 25, 26];
/// Class id that absorbs empty expression classes when merging is requested.
pub const OTHER_CLASS: usize = 7;

pub const VA_SENTINEL: f64 = -5.0;
pub const LABEL_SENTINEL: i8 = -1;

/// Header of the annotation CSV.
pub fn annotation_header() -> Vec<String> {
    let mut cols: Vec<String> = ["image", "valence", "arousal", "expression"].iter().map(|s| s.to_string()).collect();
    cols.extend(AU_CODES.iter().map(|c| format!("au{c}")));
    cols
}

/// One image's labels with per-task validity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffectSample {
    image_ref: String,
    valence: f64,
    arousal: f64,
    expression: i8,
    aus: [i8; AU_COUNT],
    va_valid: bool,
    expr_valid: bool,
    au_valid: [bool; AU_COUNT],
}

impl AffectSample {
    /// Builds a sample from optional labels; `None` means "not annotated".
    pub fn new(
        image_ref: impl Into<String>,
        va: Option<[f64; 2]>,
        expression: Option<usize>,
        aus: [Option<bool>; AU_COUNT],
    ) -> Result<Self> {
        let image_ref = image_ref.into();
        if let Some([v, a]) = va {
            if !(-1.0..=1.0).contains(&v) || !(-1.0..=1.0).contains(&a) {
                return Err(Error::invalid(format!("{image_ref}: valence/arousal ({v}, {a}) outside [-1, 1]")));
            }
        }
        if let Some(e) = expression {
            if e >= EXPR_CLASSES {
                return Err(Error::invalid(format!("{image_ref}: expression {e} outside 0..=7")));
            }
        }
        let (valence, arousal) = match va {
            Some([v, a]) => (v, a),
            None => (VA_SENTINEL, VA_SENTINEL),
        };
        let mut au_bits = [LABEL_SENTINEL; AU_COUNT];
        let mut au_valid = [false; AU_COUNT];
        for (i, au) in aus.iter().enumerate() {
            if let Some(bit) = au {
                au_bits[i] = i8::from(*bit);
                au_valid[i] = true;
            }
        }
        Ok(Self {
            image_ref,
            valence,
            arousal,
            expression: expression.map_or(LABEL_SENTINEL, |e| e as i8),
            aus: au_bits,
            va_valid: va.is_some(),
            expr_valid: expression.is_some(),
            au_valid,
        })
    }

    /// Parses raw (possibly sentinel) field values.
    fn from_raw(
        image_ref: &str,
        valence: f64,
        arousal: f64,
        expression: i64,
        aus: [i64; AU_COUNT],
    ) -> Result<Self, String> {
        let va = match (valence == VA_SENTINEL, arousal == VA_SENTINEL) {
            (true, true) => None,
            (false, false) => {
                for (name, x) in [("valence", valence), ("arousal", arousal)] {
                    if !(-1.0..=1.0).contains(&x) {
                        return Err(format!("{name} {x} is neither in [-1, 1] nor -5"));
                    }
                }
                Some([valence, arousal])
            }
            _ => return Err(format!("valence {valence} and arousal {arousal} must both be -5 or both be valid")),
        };
        let expr = match expression {
            -1 => None,
            0..=7 => Some(expression as usize),
            other => return Err(format!("expression {other} is neither in 0..=7 nor -1")),
        };
        let mut au_labels = [None; AU_COUNT];
        for (i, raw) in aus.iter().enumerate() {
            au_labels[i] = match raw {
                -1 => None,
                0 => Some(false),
                1 => Some(true),
                other => return Err(format!("au{} value {other} is not 0, 1 or -1", AU_CODES[i])),
            };
        }
        Self::new(image_ref, va, expr, au_labels).map_err(|e| e.to_string())
    }

    pub fn image_ref(&self) -> &str {
        &self.image_ref
    }

    /// `[valence, arousal]` when annotated.
    pub fn va(&self) -> Option<[f64; 2]> {
        self.va_valid.then_some([self.valence, self.arousal])
    }

    pub fn expression(&self) -> Option<usize> {
        self.expr_valid.then_some(self.expression as usize)
    }

    pub fn au(&self, index: usize) -> Option<bool> {
        self.au_valid[index].then_some(self.aus[index] == 1)
    }

    pub fn aus(&self) -> [Option<bool>; AU_COUNT] {
        std::array::from_fn(|i| self.au(i))
    }

    pub fn va_valid(&self) -> bool {
        self.va_valid
    }

    pub fn expr_valid(&self) -> bool {
        self.expr_valid
    }

    pub fn au_valid(&self) -> [bool; AU_COUNT] {
        self.au_valid
    }

    pub fn any_au_valid(&self) -> bool {
        self.au_valid.iter().any(|v| *v)
    }

    /// Raw field values as written to disk, sentinels included.
    fn raw_fields(&self) -> Vec<String> {
        let mut fields = vec![
            self.image_ref.clone(),
            self.valence.to_string(),
            self.arousal.to_string(),
            self.expression.to_string(),
        ];
        fields.extend(self.aus.iter().map(|a| a.to_string()));
        fields
    }

    pub(crate) fn with_expression(&self, expression: Option<usize>) -> Self {
        let mut out = self.clone();
        out.expr_valid = expression.is_some();
        out.expression = expression.map_or(LABEL_SENTINEL, |e| e as i8);
        out
    }
}

/// Reads an annotation CSV.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AffectSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(file, path)
}

pub(crate) fn read_annotations(reader: impl std::io::Read, path: &Path) -> Result<Vec<AffectSample>> {
    let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "file is empty".into()));
    }
    let expected = annotation_header();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("header must be `{}`", expected.join(","))));
    }

    let mut samples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(parse_err(line, format!("expected {} columns, found {}", expected.len(), record.len())));
        }
        let real = |i: usize| -> Result<f64> {
            let x: f64 = record[i]
                .parse()
                .map_err(|_| parse_err(line, format!("{}: {:?} is not a number", expected[i], &record[i])))?;
            if !x.is_finite() {
                return Err(parse_err(line, format!("{}: {:?} is not finite", expected[i], &record[i])));
            }
            Ok(x)
        };
        let int = |i: usize| -> Result<i64> {
            record[i]
                .parse()
                .map_err(|_| parse_err(line, format!("{}: {:?} is not an integer", expected[i], &record[i])))
        };
        if record[0].is_empty() {
            return Err(parse_err(line, "image reference is empty".into()));
        }
        let valence = real(1)?;
        let arousal = real(2)?;
        let expression = int(3)?;
        let mut aus = [0i64; AU_COUNT];
        for (k, au) in aus.iter_mut().enumerate() {
            *au = int(4 + k)?;
        }
        let sample =
            AffectSample::from_raw(&record[0], valence, arousal, expression, aus).map_err(|m| parse_err(line, m))?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(parse_err(1, "no annotation rows".into()));
    }
    Ok(samples)
}

/// Writes samples in the annotation CSV schema.
pub fn write_annotations(path: impl AsRef<Path>, samples: &[AffectSample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_annotations_to(file, samples).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_annotations_to(writer: impl Write, samples: &[AffectSample]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(annotation_header())?;
    for s in samples {
        w.write_record(s.raw_fields())?;
    }
    w.flush()
}

/// Label counts over a sample set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_samples: u64,
    pub n_va_valid: u64,
    pub n_expr_valid: u64,
    pub expr_counts: [u64; EXPR_CLASSES],
    pub au_pos_counts: [u64; AU_COUNT],
    pub au_valid_counts: [u64; AU_COUNT],
}

pub fn compute_stats(samples: &[AffectSample]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot compute statistics of an empty sample set"));
    }
    let mut stats = DatasetStats {
        n_samples: samples.len() as u64,
        n_va_valid: 0,
        n_expr_valid: 0,
        expr_counts: [0; EXPR_CLASSES],
        au_pos_counts: [0; AU_COUNT],
        au_valid_counts: [0; AU_COUNT],
    };
    for s in samples {
        if s.va_valid {
            stats.n_va_valid += 1;
        }
        if let Some(e) = s.expression() {
            stats.n_expr_valid += 1;
            stats.expr_counts[e] += 1;
        }
        for (i, au) in s.aus().iter().enumerate() {
            if let Some(bit) = au {
                stats.au_valid_counts[i] += 1;
                stats.au_pos_counts[i] += u64::from(*bit);
            }
        }
    }
    Ok(stats)
}

/// Inverse-frequency weights for the expression loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: [f64; EXPR_CLASSES],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self { weights: [1.0; EXPR_CLASSES] }
    }

    pub fn new(weights: [f64; EXPR_CLASSES]) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid(format!("class weights must be positive: {weights:?}")));
        }
        Ok(Self { weights })
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }
}

/// `total / count` per class. Fails on the first empty class.
pub fn inverse_frequency(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .enumerate()
        .map(
            |(class, &c)| {
                if c == 0 {
                    Err(Error::MissingExpressionClass { class })
                } else {
                    Ok(total as f64 / c as f64)
                }
            },
        )
        .collect()
}

pub fn compute_class_weights(stats: &DatasetStats) -> Result<ClassWeights> {
    let w = inverse_frequency(&stats.expr_counts)?;
    ClassWeights::new(w.try_into().expect("eight classes"))
}

/// Like [`compute_class_weights`], but classes with no samples take the
/// weight of class 7 ("other"). Class 7 itself must be present.
pub fn compute_class_weights_merged(stats: &DatasetStats) -> Result<ClassWeights> {
    let total = stats.n_expr_valid as f64;
    let other = stats.expr_counts[OTHER_CLASS];
    if other == 0 {
        return Err(Error::MissingExpressionClass { class: OTHER_CLASS });
    }
    let w_other = total / other as f64;
    let weights = std::array::from_fn(|c| match stats.expr_counts[c] {
        0 => w_other,
        n => total / n as f64,
    });
    ClassWeights::new(weights)
}

/// Relabels samples whose expression is one of `classes` as class 7.
pub fn merge_classes_into_other(samples: &[AffectSample], classes: &[usize]) -> Vec<AffectSample> {
    samples
        .iter()
        .map(|s| match s.expression() {
            Some(e) if classes.contains(&e) => s.with_expression(Some(OTHER_CLASS)),
            _ => s.clone(),
        })
        .collect()
}

/// Human-readable names for the 8 expression ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpressionNames(pub [String; EXPR_CLASSES]);

impl Default for ExpressionNames {
    fn default() -> Self {
        Self(["neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise", "other"].map(String::from))
    }
}
