//! Per-stage metrics as CSV.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub scene: String,
    pub mode: String,
    /// Axis sizes joined with `x`, e.g. `64x64x64`.
    pub grid_dims: String,
    pub stage: usize,
    pub iteration: usize,
    pub loss: f64,
    /// Empty when the pipeline has no image metric.
    pub psnr_db: Option<f64>,
    pub wall_seconds: f64,
}

pub fn format_dims(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("metrics CSV: {other:?}")),
    }
}

/// Appends rows to a fresh CSV file, flushing after each so a crashed run
/// keeps the stages it finished.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            inner: csv::Writer::from_path(path).map_err(csv_error)?,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_error)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}
