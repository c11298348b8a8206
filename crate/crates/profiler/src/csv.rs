//! Plain CSV tables with round-trip-exact floats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use blockdance_core::{Error, Result, Tensor};

/// 17 significant digits, enough to read back the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    fs::write(path, render(header, rows)).map_err(|e| Error::io(path, e))
}

/// Matrix rows prefixed with a label column.
pub fn matrix_rows(labels: &[String], m: &Tensor) -> Result<Vec<Vec<String>>> {
    let (r, _) = m.dims2()?;
    if labels.len() != r {
        return Err(Error::Dimension(format!("{} labels for {r} rows", labels.len())));
    }
    Ok((0..r)
        .map(|i| {
            std::iter::once(labels[i].clone())
                .chain(m.row(i).iter().map(|&v| format_f64(v)))
                .collect()
        })
        .collect())
}
