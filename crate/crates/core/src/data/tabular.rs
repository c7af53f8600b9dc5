use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Format(format!(
            "row at line {} has {len} fields, expected {expected_len}",
            line.unwrap_or(0)
        )),
        other => Error::Format(format!("CSV error near line {}: {other:?}", line.unwrap_or(0))),
    }
}

/// Reads a header-led numeric CSV. Every column other than `label_column`
/// becomes a feature, in header order; labels must be non-negative integers.
pub fn load_csv_features(path: &Path, label_column: &str) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Config(format!("label column {label_column:?} not in header")))?;
    let cols = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        for (i, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if i == label_idx {
                let label = cell
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("row at line {line}: label {cell:?} is not a class index")))?;
                labels.push(label);
            } else {
                let v = cell
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("row at line {line}: {cell:?} is not a finite number")))?;
                features.push(v);
            }
        }
    }
    let rows = labels.len();
    Dataset::new(Tensor2D::new(rows, cols, features)?, labels)
}

/// Writes features and labels with a header `f0,...,f{n-1},<label_column>`.
pub fn write_csv_features(path: &Path, data: &Dataset, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..data.dims()).map(|i| format!("f{i}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in 0..data.len() {
        let mut rec: Vec<String> = data.features.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[r].to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
