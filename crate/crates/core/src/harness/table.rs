//! Minimal column-addressed reading and writing of numeric CSV tables.

use std::path::Path;

use crate::error::{Error, Result};

/// A CSV file held as its header and string cells.
pub(crate) struct Table {
    path: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub(crate) fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let header = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self {
            path: path.display().to_string(),
            header,
            rows,
        })
    }

    pub(crate) fn len(&self) -> usize {
        self.rows.len()
    }

    fn index(&self, column: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no column `{column}`", self.path)))
    }

    pub(crate) fn text(&self, column: &str) -> Result<Vec<&str>> {
        let i = self.index(column)?;
        Ok(self.rows.iter().map(|r| r[i].as_str()).collect())
    }

    pub(crate) fn column(&self, column: &str) -> Result<Vec<f64>> {
        let i = self.index(column)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(row, r)| {
                r[i].parse::<f64>().map_err(|e| {
                    Error::InvalidConfig(format!("{} row {row} column `{column}`: {e}", self.path))
                })
            })
            .collect()
    }

    /// Columns `{prefix}_0 … {prefix}_{k-1}` as per-row vectors.
    pub(crate) fn vectors(&self, prefix: &str, k: usize) -> Result<Vec<Vec<f64>>> {
        let cols = (0..k)
            .map(|i| self.column(&format!("{prefix}_{i}")))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..self.len())
            .map(|r| cols.iter().map(|c| c[r]).collect())
            .collect())
    }

    /// Number of columns named `{prefix}_<i>`.
    pub(crate) fn count_prefixed(&self, prefix: &str) -> usize {
        let stem = format!("{prefix}_");
        self.header
            .iter()
            .filter(|h| {
                h.strip_prefix(&stem)
                    .is_some_and(|rest| rest.parse::<usize>().is_ok())
            })
            .count()
    }
}

/// Writes a header and rows of cells.
pub(crate) fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// `{prefix}_0 … {prefix}_{k-1}`.
pub(crate) fn indexed(prefix: &str, k: usize) -> Vec<String> {
    (0..k).map(|i| format!("{prefix}_{i}")).collect()
}

pub(crate) fn cells(values: &[f64]) -> Vec<String> {
    values.iter().map(f64::to_string).collect()
}
