use ndarray::Array2;

use crate::error::{AdastiError, Result};

/// Node set plus symmetric weighted adjacency built by thresholded Gaussian kernel.
#[derive(Clone, Debug)]
pub struct GraphSpec {
    /// N x N, symmetric, zero diagonal, entries in [0,1], sub-threshold entries exactly 0.
    pub adjacency: Array2<f64>,
    pub node_ids: Vec<String>,
}

impl GraphSpec {
    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn from_adjacency(adjacency: Array2<f64>, node_ids: Vec<String>) -> Result<Self> {
        if adjacency.nrows() != adjacency.ncols() {
            return Err(AdastiError::contract("adjacency must be square"));
        }
        if node_ids.len() != adjacency.nrows() {
            return Err(AdastiError::contract("node id count must match adjacency size"));
        }
        Ok(GraphSpec { adjacency, node_ids })
    }

    /// Indices of the `count` strongest-adjacency neighbors of `node`, ties
    /// broken by node index.
    pub fn strongest_neighbors(&self, node: usize, count: usize) -> Vec<usize> {
        let n = self.n_nodes();
        let mut others: Vec<usize> = (0..n).filter(|&j| j != node).collect();
        others.sort_by(|&a, &b| {
            self.adjacency[[node, b]]
                .partial_cmp(&self.adjacency[[node, a]])
                .unwrap()
                .then(a.cmp(&b))
        });
        others.truncate(count);
        others
    }
}

/// A_ij = exp(-d_ij^2 / sigma^2) with sigma the std of all off-diagonal
/// distances; entries below `threshold` are zeroed; diagonal is zero.
pub fn build_adjacency(distances: &Array2<f64>, threshold: f64) -> Result<GraphSpec> {
    let n = distances.nrows();
    if n != distances.ncols() {
        return Err(AdastiError::contract("distance matrix must be square"));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(AdastiError::contract("threshold must lie in [0,1)"));
    }
    for i in 0..n {
        if distances[[i, i]] != 0.0 {
            return Err(AdastiError::contract("distance matrix must have a zero diagonal"));
        }
        for j in 0..n {
            if distances[[i, j]] < 0.0 {
                return Err(AdastiError::contract("distances must be nonnegative"));
            }
            if (distances[[i, j]] - distances[[j, i]]).abs() > 1e-9 {
                return Err(AdastiError::contract("distance matrix must be symmetric"));
            }
        }
    }

    let mut off: Vec<f64> = Vec::with_capacity(n * n - n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off.push(distances[[i, j]]);
            }
        }
    }
    let mean = off.iter().sum::<f64>() / off.len().max(1) as f64;
    let var = off.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / off.len().max(1) as f64;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(AdastiError::DegenerateGeometry(
            "all pairwise distances identical; kernel width is zero".into(),
        ));
    }

    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let w = (-distances[[i, j]].powi(2) / (sigma * sigma)).exp();
                a[[i, j]] = if w >= threshold { w } else { 0.0 };
            }
        }
    }
    let node_ids = (0..n).map(|i| format!("n{i}")).collect();
    Ok(GraphSpec { adjacency: a, node_ids })
}

/// Symmetrically degree-normalized adjacency with self-loops:
/// D^{-1/2} (A + I) D^{-1/2}.
pub fn normalized_adjacency(graph: &GraphSpec) -> Array2<f64> {
    let n = graph.n_nodes();
    let mut a = graph.adjacency.clone();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = a[[i, j]] / (deg[i].sqrt() * deg[j].sqrt());
        }
    }
    out
}
