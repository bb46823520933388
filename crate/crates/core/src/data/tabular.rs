//! Delimited-text ingestion.

use std::collections::HashMap;
use std::path::Path;

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Reads a headed delimited file. Every column except `label_column` must be
/// numeric; labels are re-indexed densely in order of first appearance.
pub fn load_csv(path: &Path, label_column: &str, delimiter: u8) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    read_records(reader, label_column)
}

pub fn parse_csv(text: &str, label_column: &str, delimiter: u8) -> Result<Dataset> {
    let reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    read_records(reader, label_column)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn read_records<R: std::io::Read>(
    mut reader: csv::Reader<R>,
    label_column: &str,
) -> Result<Dataset> {
    let headers = reader.headers().map_err(csv_err)?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| {
            Error::Config(format!("label column {label_column:?} not found in header"))
        })?;
    let width = headers.len();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                let key = field.trim().to_string();
                let next = names.len();
                let id = *index.entry(key.clone()).or_insert_with(|| {
                    names.push(key);
                    next
                });
                labels.push(id);
            } else {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric value {field:?} in column {:?}", &headers[i]),
                })?;
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no data rows".into()));
    }
    let n = labels.len();
    let d = width - 1;
    if d == 0 {
        return Err(Error::Config("no feature columns besides the label".into()));
    }
    let k = names.len();
    Dataset::with_class_names(
        Tensor::new(&[n, d], features)?,
        labels,
        k,
        (0..n as u64).collect(),
        names,
    )
}

/// Writes a tabular dataset with columns `x0..x{d-1}` and a trailing label
/// column holding the class names.
pub fn write_csv(dataset: &Dataset, path: &Path, label_column: &str, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(csv_err)?;
    let d = dataset.feature_dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset
            .features
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        row.push(dataset.class_names[dataset.labels[i]].clone());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
