//! JSON/CSV plumbing shared by the modules and the command line.
//!
//! Floats go through serde_json's shortest round-trip formatting, so a value
//! written and read back is the same bit pattern.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Mat, Result};

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Convert nested rows into a matrix, checking the shape and finiteness.
/// `cols` of `None` takes the width of the first row.
pub fn rows_to_mat(path: &str, rows: &[Vec<f64>], nrows: usize, cols: Option<usize>) -> Result<Mat> {
    if rows.len() != nrows {
        return Err(Error::dimension(path, format!("{nrows} rows"), rows.len()));
    }
    let ncols = cols.unwrap_or_else(|| rows.first().map_or(0, |r| r.len()));
    let mut m = Array2::zeros((nrows, ncols));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::dimension(
                format!("{path}[{i}]"),
                format!("{ncols} entries"),
                row.len(),
            ));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{path}[{i}][{j}]"), "not a finite number"));
            }
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, to_json_pretty(value)?)?;
    Ok(())
}

/// Rows of a CSV file with a header line.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}
