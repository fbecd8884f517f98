//! Per-epoch metrics rows and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;

use super::TrainError;

/// One epoch of training as logged.
///
/// The selection columns are empty when selection never ran that epoch;
/// `planted_recovery` counts only feasible examples and is empty once gold
/// captions leave the pipeline. `mean_inner_product` averages over every
/// (example, caption) score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub val_soft_acc: f64,
    pub feasible_rate: Option<f64>,
    pub planted_recovery: Option<f64>,
    pub mean_inner_product: Option<f64>,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, TrainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| TrainError::Io(std::io::Error::other(e)))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), TrainError> {
    let bytes = metrics_to_csv(rows)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(TrainError::Csv)?;
    r.deserialize().map(|row| row.map_err(TrainError::Csv)).collect()
}
