//! File formats: raw little-endian `f32` matrices with a JSON sidecar,
//! header-free CSV matrices, and `index,value` score tables.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attnmap::{AttentionMap, HeadStack};
use crate::error::{Error, Result};

/// JSON sidecar describing a raw `f32` buffer: `heads` row-major
/// `rows x cols` matrices stored back to back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    #[serde(default = "one")]
    pub heads: usize,
    /// Token-grid height, for feature maps whose rows are grid tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
}

fn one() -> usize {
    1
}

impl MatrixMeta {
    pub fn new(rows: usize, cols: usize, heads: usize) -> Self {
        Self {
            rows,
            cols,
            heads,
            height: None,
            width: None,
        }
    }

    pub fn element_count(&self) -> usize {
        self.rows * self.cols * self.heads
    }
}

/// Default sidecar location: the data path with its extension replaced by `json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

pub fn read_meta(path: &Path) -> Result<MatrixMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_f32(path: &Path, meta: &MatrixMeta) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = meta.element_count() * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            what: "f32 matrix",
            detail: format!("{}: {} bytes, sidecar implies {expected}", path.display(), bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

/// Write `values` as little-endian `f32` plus the sidecar next to it.
pub fn write_f32(path: &Path, meta: &MatrixMeta, values: &[f64]) -> Result<()> {
    if values.len() != meta.element_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for sidecar {}x{}x{}",
            values.len(),
            meta.heads,
            meta.rows,
            meta.cols
        )));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

/// Header-free CSV, one matrix row per line.
pub fn read_csv_matrix(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record?;
        if cols.is_some_and(|c| c != record.len()) {
            return Err(Error::Format {
                what: "CSV matrix",
                detail: format!("row {rows} has {} fields", record.len()),
            });
        }
        cols = Some(record.len());
        for field in record.iter() {
            data.push(parse_f64(field, "CSV matrix")?);
        }
        rows += 1;
    }
    Ok((rows, cols.unwrap_or(0), data))
}

/// Load every head of an attention map from `.csv` (single head) or raw `f32`.
pub fn load_head_stack(path: &Path, meta: Option<&Path>) -> Result<HeadStack> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let (rows, cols, data) = read_csv_matrix(path)?;
        return HeadStack::new(vec![AttentionMap::new(rows, cols, data)?]);
    }
    let meta_path = meta.map_or_else(|| sidecar_path(path), Path::to_path_buf);
    let meta = read_meta(&meta_path)?;
    let data = read_f32(path, &meta)?;
    let per_head = meta.rows * meta.cols;
    let heads = data
        .chunks_exact(per_head.max(1))
        .map(|chunk| AttentionMap::new(meta.rows, meta.cols, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    HeadStack::new(heads)
}

pub fn write_scores_csv(path: &Path, scores: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["index", "value"])?;
    for (i, v) in scores.iter().enumerate() {
        writer.write_record([i.to_string(), format!("{v:e}")])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Read `index,value` rows; a non-numeric first row is treated as a header.
pub fn read_scores_csv(path: &Path) -> Result<Vec<f64>> {
    let rows = read_loose_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if row.len() != 2 {
            return Err(Error::Format {
                what: "scores CSV",
                detail: format!("row {i} has {} fields, expected index,value", row.len()),
            });
        }
        let idx: usize = row[0].parse().map_err(|_| Error::Format {
            what: "scores CSV",
            detail: format!("bad index `{}`", row[0]),
        })?;
        if idx != i {
            return Err(Error::Format {
                what: "scores CSV",
                detail: format!("index {idx} on row {i}; rows must be in order"),
            });
        }
        out.push(parse_f64(&row[1], "scores CSV")?);
    }
    Ok(out)
}

/// One value per line, or `step,value` pairs (the last field is used).
pub fn read_series_csv(path: &Path) -> Result<Vec<f64>> {
    read_loose_rows(path)?
        .iter()
        .map(|row| parse_f64(row.last().map_or("", String::as_str), "series CSV"))
        .collect()
}

fn read_loose_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let fields: Vec<String> = record.iter().map(str::to_owned).collect();
        if fields.iter().all(String::is_empty) {
            continue;
        }
        let numeric = fields.last().is_some_and(|f| f.parse::<f64>().is_ok());
        if i == 0 && !numeric {
            continue;
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn parse_f64(field: &str, what: &'static str) -> Result<f64> {
    field.parse().map_err(|_| Error::Format {
        what,
        detail: format!("`{field}` is not a number"),
    })
}
