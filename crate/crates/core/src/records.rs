//! Per-sample model outputs and the predictions CSV.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use crate::annotations::{AU_CODES, AU_COUNT, EXPR_CLASSES};
use crate::error::{Error, Result};
use crate::models::Task;

/// Probabilities and VA values a model produced for one image. Tasks the
/// model does not predict are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_ref: String,
    pub va: Option<[f64; 2]>,
    pub expr_probs: Option<[f64; EXPR_CLASSES]>,
    pub au_probs: Option<[f64; AU_COUNT]>,
}

impl PredictionRecord {
    pub fn empty(image_ref: impl Into<String>) -> Self {
        Self { image_ref: image_ref.into(), va: None, expr_probs: None, au_probs: None }
    }

    pub fn has(&self, task: Task) -> bool {
        match task {
            Task::Va => self.va.is_some(),
            Task::Expr => self.expr_probs.is_some(),
            Task::Au => self.au_probs.is_some(),
        }
    }

    /// Copies the tasks present in `other` into `self`; a task present in both is an error.
    pub fn merge(&mut self, other: &PredictionRecord) -> Result<()> {
        if self.image_ref != other.image_ref {
            return Err(Error::Misaligned(format!("cannot merge {} with {}", self.image_ref, other.image_ref)));
        }
        for task in Task::ALL {
            if self.has(task) && other.has(task) {
                return Err(Error::invalid(format!(
                    "{}: {task} predicted by more than one checkpoint",
                    self.image_ref
                )));
            }
        }
        self.va = self.va.or(other.va);
        self.expr_probs = self.expr_probs.or(other.expr_probs);
        self.au_probs = self.au_probs.or(other.au_probs);
        Ok(())
    }
}

pub fn prediction_header() -> Vec<String> {
    let mut cols = vec!["image".to_string(), "valence".into(), "arousal".into()];
    cols.extend((0..EXPR_CLASSES).map(|k| format!("expr_p{k}")));
    cols.extend(AU_CODES.iter().map(|c| format!("au_p{c}")));
    cols
}

fn push_opt<const N: usize>(fields: &mut Vec<String>, values: Option<[f64; N]>) {
    match values {
        Some(v) => fields.extend(v.iter().map(f64::to_string)),
        None => fields.extend(std::iter::repeat_n(String::new(), N)),
    }
}

/// Writes records; absent tasks are left as empty cells.
pub fn write_predictions(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(prediction_header()).map_err(io)?;
    for r in records {
        let mut fields = vec![r.image_ref.clone()];
        push_opt(&mut fields, r.va);
        push_opt(&mut fields, r.expr_probs);
        push_opt(&mut fields, r.au_probs);
        w.write_record(&fields).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let expected = prediction_header();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("header must be `{}`", expected.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != expected.len() {
            return Err(parse_err(line, format!("expected {} columns, found {}", expected.len(), row.len())));
        }
        let block = |start: usize, n: usize| -> Result<Option<Vec<f64>>> {
            let cells: Vec<&str> = (start..start + n).map(|i| &row[i]).collect();
            if cells.iter().all(|c| c.is_empty()) {
                return Ok(None);
            }
            cells
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    c.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| parse_err(line, format!("{}: {c:?} is not a number", expected[start + k])))
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let va = block(1, 2)?.map(|v| [v[0], v[1]]);
        let expr_probs = block(3, EXPR_CLASSES)?.map(|v| v.try_into().expect("block size"));
        let au_probs = block(3 + EXPR_CLASSES, AU_COUNT)?.map(|v| v.try_into().expect("block size"));
        out.push(PredictionRecord { image_ref: row[0].to_string(), va, expr_probs, au_probs });
    }
    if out.is_empty() {
        return Err(parse_err(1, "no prediction rows".into()));
    }
    Ok(out)
}

/// Index from image reference to position; duplicates are an error.
pub(crate) fn index_by_ref<'a, I>(refs: I) -> Result<HashMap<&'a str, usize>>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut map = HashMap::new();
    for (i, r) in refs.into_iter().enumerate() {
        if map.insert(r, i).is_some() {
            return Err(Error::Misaligned(format!("duplicate image reference {r}")));
        }
    }
    Ok(map)
}

/// Reorders `records` to follow `order`, failing on any missing reference.
pub fn align_records<'a>(records: &'a [PredictionRecord], order: &[&str]) -> Result<Vec<&'a PredictionRecord>> {
    let index = index_by_ref(records.iter().map(|r| r.image_ref.as_str()))?;
    order
        .iter()
        .map(|r| index.get(r).map(|&i| &records[i]).ok_or_else(|| Error::Misaligned(format!("no prediction for {r}"))))
        .collect()
}
