//! Dataset-level scoring of model attention against reference grids.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::TapeError;
use crate::data::{write_atomic, EncodedExample, RecordMeta};
use crate::model::Model;

use super::emd::emd;
use super::raster::{rasterize, AttentionGrid, AttnError, GRID_SIDE};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{got} metadata rows against {expected} examples")]
    MetaCount { got: usize, expected: usize },
    #[error("example {index}: {got} boxes against {expected} valid objects")]
    BoxCount { index: usize, got: usize, expected: usize },
    #[error("adjusted attention requested from a model built without it")]
    NoAdjustment,
    #[error("no example carries an attention reference")]
    Empty,
    #[error("example {index}: {source}")]
    Grid { index: usize, source: AttnError },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One scored example: its position in the evaluated slice and its distance
/// to the reference grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub example_id: usize,
    pub emd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub count: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionEvalReport {
    pub caa: bool,
    pub rows: Vec<EvalRow>,
    pub mean: f64,
    pub skipped: usize,
}

#[derive(Serialize)]
struct CsvRow {
    example_id: usize,
    emd: f64,
    caa_flag: bool,
}

impl AttentionEvalReport {
    pub fn summary(&self) -> Summary {
        Summary { mean: self.mean, count: self.rows.len(), skipped: self.skipped }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, EvalError> {
        reports_to_csv(&[self])
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let bytes = self.to_csv()?;
        write_atomic(path, &bytes)?;
        Ok(())
    }
}

/// One CSV, any number of reports; the flag column tells their rows apart.
pub fn reports_to_csv(reports: &[&AttentionEvalReport]) -> Result<Vec<u8>, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rep in reports {
        for r in &rep.rows {
            w.serialize(CsvRow { example_id: r.example_id, emd: r.emd, caa_flag: rep.caa })?;
        }
    }
    w.into_inner().map_err(|e| EvalError::Io(std::io::Error::other(e)))
}

/// Score a model's attention against every example's reference grid.
///
/// With `caa` on, each valid object is weighted by its caption-adjusted
/// `α^cv`; off, every valid object counts 1.0 and the model is never
/// consulted. Examples without a reference are skipped and counted.
pub fn evaluate_attention(
    model: &Model,
    examples: &[EncodedExample],
    metas: &[RecordMeta],
    caa: bool,
) -> Result<AttentionEvalReport, EvalError> {
    if metas.len() != examples.len() {
        return Err(EvalError::MetaCount { got: metas.len(), expected: examples.len() });
    }
    let scored: Vec<Option<f64>> = examples
        .par_iter()
        .zip(metas.par_iter())
        .enumerate()
        .map(|(i, (ex, meta))| score_example(model, i, ex, meta, caa))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for (i, s) in scored.iter().enumerate() {
        match s {
            Some(d) => rows.push(EvalRow { example_id: i, emd: *d }),
            None => skipped += 1,
        }
    }
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = rows.iter().map(|r| r.emd).sum::<f64>() / rows.len() as f64;
    Ok(AttentionEvalReport { caa, rows, mean, skipped })
}

fn score_example(
    model: &Model,
    index: usize,
    ex: &EncodedExample,
    meta: &RecordMeta,
    caa: bool,
) -> Result<Option<f64>, EvalError> {
    let Some(truth) = &ex.attention_truth else {
        return Ok(None);
    };
    let truth = AttentionGrid::from_normalized(GRID_SIDE, truth.clone())
        .map_err(|source| EvalError::Grid { index, source })?;
    if meta.boxes.len() != ex.valid_objects {
        return Err(EvalError::BoxCount {
            index,
            got: meta.boxes.len(),
            expected: ex.valid_objects,
        });
    }
    let weights = if caa {
        model.adjusted_attention(ex)?.ok_or(EvalError::NoAdjustment)?
    } else {
        vec![1.0; ex.valid_objects]
    };
    let attention = rasterize(&meta.boxes, &weights, GRID_SIDE)
        .map_err(|source| EvalError::Grid { index, source })?;
    let d = emd(&attention, &truth).map_err(|source| EvalError::Grid { index, source })?;
    Ok(Some(d))
}
