use ndarray::Array2;

use crate::data::series::RawSeriesTable;
use crate::error::{AdastiError, Result};

/// Per-node affine normalization record: value -> (value - mean) / std.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One windowed sample: X is nodes x timestamps in normalized units, M the
/// observation mask. Entries with M=0 hold the designated fill value 0 and are
/// never read as data.
#[derive(Clone, Debug)]
pub struct MaskedSample {
    pub x: Array2<f64>,
    pub m: Array2<u8>,
    pub norm_stats: NormStats,
}

impl MaskedSample {
    pub fn n_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.x.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.m.iter().filter(|&&m| m == 1).count()
    }

    /// Exact inverse of the per-node affine normalization.
    pub fn denormalize(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        if values.dim() != self.x.dim() {
            return Err(AdastiError::contract(format!(
                "denormalize shape mismatch: {:?} vs {:?}",
                values.dim(),
                self.x.dim()
            )));
        }
        let mut out = values.clone();
        for (n, mut row) in out.rows_mut().into_iter().enumerate() {
            let (mean, std) = (self.norm_stats.mean[n], self.norm_stats.std[n]);
            row.mapv_inplace(|v| v * std + mean);
        }
        Ok(out)
    }

    /// Apply the forward normalization to sensor-unit values.
    pub fn normalize(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        if values.dim() != self.x.dim() {
            return Err(AdastiError::contract("normalize shape mismatch"));
        }
        let mut out = values.clone();
        for (n, mut row) in out.rows_mut().into_iter().enumerate() {
            let (mean, std) = (self.norm_stats.mean[n], self.norm_stats.std[n]);
            row.mapv_inplace(|v| (v - mean) / std);
        }
        Ok(out)
    }
}

/// Compute per-node mean/std over observed entries of the first
/// `train_fraction` of timestamps, then cut non-overlapping (or strided)
/// windows of length `window_len` over the whole table.
///
/// Nodes whose observed values are constant fall back to std 1 so z-scores
/// stay finite.
pub fn window_and_normalize(
    table: &RawSeriesTable,
    window_len: usize,
    stride: usize,
    train_fraction: f64,
) -> Result<Vec<MaskedSample>> {
    let (t_total, n) = table.values.dim();
    if window_len > t_total {
        return Err(AdastiError::contract(format!(
            "window length {window_len} exceeds {t_total} timestamps"
        )));
    }
    if stride == 0 {
        return Err(AdastiError::contract("stride must be positive"));
    }
    let t_train = ((t_total as f64) * train_fraction).round() as usize;
    let t_train = t_train.clamp(1, t_total);

    let mut mean = vec![0.0; n];
    let mut std = vec![0.0; n];
    for node in 0..n {
        let mut vals = Vec::new();
        for t in 0..t_train {
            if table.observed[[t, node]] == 1 {
                vals.push(table.values[[t, node]]);
            }
        }
        if vals.is_empty() {
            return Err(AdastiError::Normalization {
                node: table.node_ids[node].clone(),
                message: "no observed entries in the training split".into(),
            });
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        mean[node] = m;
        std[node] = if v.sqrt() > 0.0 { v.sqrt() } else { 1.0 };
    }
    let stats = NormStats { mean, std };

    let mut samples = Vec::new();
    let mut start = 0usize;
    while start + window_len <= t_total {
        let mut x = Array2::<f64>::zeros((n, window_len));
        let mut m = Array2::<u8>::zeros((n, window_len));
        for node in 0..n {
            for l in 0..window_len {
                let t = start + l;
                if table.observed[[t, node]] == 1 {
                    x[[node, l]] = (table.values[[t, node]] - stats.mean[node]) / stats.std[node];
                    m[[node, l]] = 1;
                }
            }
        }
        samples.push(MaskedSample { x, m, norm_stats: stats.clone() });
        start += stride;
    }
    Ok(samples)
}
