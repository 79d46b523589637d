use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{AdastiError, Result};

/// Full dataset as read from disk: rows are timestamps, columns are nodes.
/// Native missingness (cells equal to the missing token) is tracked in `observed`.
#[derive(Clone, Debug)]
pub struct RawSeriesTable {
    /// timestamps x nodes, in sensor units; missing cells hold 0.0 and are
    /// flagged in `observed`.
    pub values: Array2<f64>,
    pub observed: Array2<u8>,
    pub node_ids: Vec<String>,
}

impl RawSeriesTable {
    pub fn n_timestamps(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.ncols()
    }

    pub fn native_missing_count(&self) -> usize {
        self.observed.iter().filter(|&&m| m == 0).count()
    }
}

/// Load a CSV dataset: header row of node ids, one row per timestamp.
/// Cells equal to `missing_token` become native-missing entries.
pub fn load_series_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<RawSeriesTable> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header = lines
        .next()
        .ok_or_else(|| AdastiError::Parse { line: 1, message: "empty file".into() })??;
    let node_ids: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n_nodes = node_ids.len();
    {
        let mut seen = std::collections::HashSet::new();
        for id in &node_ids {
            if !seen.insert(id) {
                return Err(AdastiError::Parse {
                    line: 1,
                    message: format!("duplicate node id '{id}' in header"),
                });
            }
        }
    }

    let mut rows: Vec<f64> = Vec::new();
    let mut obs: Vec<u8> = Vec::new();
    let mut n_rows = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if cells.len() != n_nodes {
            return Err(AdastiError::Parse {
                line: line_no,
                message: format!("expected {n_nodes} cells, found {}", cells.len()),
            });
        }
        for cell in cells {
            if cell == missing_token {
                rows.push(0.0);
                obs.push(0);
            } else {
                let v: f64 = cell.parse().map_err(|_| AdastiError::Parse {
                    line: line_no,
                    message: format!("non-numeric cell '{cell}'"),
                })?;
                rows.push(v);
                obs.push(1);
            }
        }
        n_rows += 1;
    }

    let values = Array2::from_shape_vec((n_rows, n_nodes), rows)
        .map_err(|e| AdastiError::Parse { line: 0, message: e.to_string() })?;
    let observed = Array2::from_shape_vec((n_rows, n_nodes), obs)
        .map_err(|e| AdastiError::Parse { line: 0, message: e.to_string() })?;
    Ok(RawSeriesTable { values, observed, node_ids })
}

/// Load a headerless numeric CSV matrix (distance matrices, masks).
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut data: Vec<f64> = Vec::new();
    let mut n_cols = None;
    let mut n_rows = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        match n_cols {
            None => n_cols = Some(cells.len()),
            Some(c) if c != cells.len() => {
                return Err(AdastiError::Parse {
                    line: i + 1,
                    message: format!("expected {c} cells, found {}", cells.len()),
                })
            }
            _ => {}
        }
        for cell in cells {
            data.push(cell.parse().map_err(|_| AdastiError::Parse {
                line: i + 1,
                message: format!("non-numeric cell '{cell}'"),
            })?);
        }
        n_rows += 1;
    }
    let n_cols = n_cols.unwrap_or(0);
    Array2::from_shape_vec((n_rows, n_cols), data)
        .map_err(|e| AdastiError::Parse { line: 0, message: e.to_string() })
}

/// Write a matrix as headerless CSV with full f64 round-trip precision.
pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let mut f = File::create(path.as_ref())?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}
