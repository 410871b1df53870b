//! IDX (MNIST-style) and CSV loaders. Both return raw values; standardization is
//! left to the caller.

use std::collections::HashMap;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image/label pair held in memory. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("IDX images: bad magic {magic:#010x}")));
    }
    let count = be_u32(images, 4, "IDX images")? as usize;
    let rows = be_u32(images, 8, "IDX images")? as usize;
    let cols = be_u32(images, 12, "IDX images")? as usize;
    let pixels = rows
        .checked_mul(cols)
        .and_then(|p| p.checked_mul(count).map(|t| (p, t)))
        .ok_or_else(|| Error::Format("IDX images: size overflow".into()))?;
    let body = &images[16..];
    if body.len() != pixels.1 {
        return Err(Error::Format(format!(
            "IDX images: expected {} pixel bytes, found {}",
            pixels.1,
            body.len()
        )));
    }

    let magic = be_u32(labels, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("IDX labels: bad magic {magic:#010x}")));
    }
    let label_count = be_u32(labels, 4, "IDX labels")? as usize;
    let label_body = &labels[8..];
    if label_body.len() != label_count {
        return Err(Error::Format(format!(
            "IDX labels: header says {label_count}, found {} bytes",
            label_body.len()
        )));
    }
    if label_count != count {
        return Err(Error::Format(format!(
            "IDX count mismatch: {count} images vs {label_count} labels"
        )));
    }
    let features = Matrix::from_vec(count, pixels.0, body.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels: Vec<usize> = label_body.iter().map(|&b| b as usize).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(features, labels, class_count)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Reads a headed, comma-separated file. Every column except `label_column` must be
/// numeric; label strings become class ids in first-appearance order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_path(path)
        .map_err(csv_error)?;
    read_csv(&mut reader, label_column)
}

pub fn parse_csv(text: &str, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .from_reader(text.as_bytes());
    read_csv(&mut reader, label_column)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

fn read_csv<R: std::io::Read>(reader: &mut csv::Reader<R>, label_column: &str) -> Result<Dataset> {
    let headers: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = headers.iter().position(|h| h == label_column).ok_or_else(|| {
        Error::Format(format!(
            "label column {label_column:?} not found; available columns: {}",
            headers.join(", ")
        ))
    })?;
    let width = headers.len() - 1;
    let mut classes: HashMap<String, usize> = HashMap::new();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        // Row numbers are 1-based and count the header line.
        let line = row + 2;
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if col == label_idx {
                let next = classes.len();
                labels.push(*classes.entry(cell.to_string()).or_insert(next));
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "unparsable cell {cell:?} at row {line}, column {} ({})",
                        col + 1,
                        headers[col]
                    ))
                })?;
                data.push(v);
            }
        }
    }
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, width, data)?, labels, classes.len())
}
