//! Non-learned imputation baselines: per-node mean fill and temporal linear
//! interpolation.

use ndarray::Array2;

/// Fill missing entries with the node's observed mean; nodes with no
/// observations fall back to the global observed mean (0 if nothing is
/// observed at all).
pub fn baseline_mean(x: &Array2<f64>, m: &Array2<u8>) -> Array2<f64> {
    let (n, l) = x.dim();
    let mut global_sum = 0.0;
    let mut global_count = 0usize;
    for i in 0..n {
        for j in 0..l {
            if m[[i, j]] == 1 {
                global_sum += x[[i, j]];
                global_count += 1;
            }
        }
    }
    let global_mean = if global_count > 0 { global_sum / global_count as f64 } else { 0.0 };
    let mut out = x.clone();
    for i in 0..n {
        let mut sum = 0.0;
        let mut count = 0usize;
        for j in 0..l {
            if m[[i, j]] == 1 {
                sum += x[[i, j]];
                count += 1;
            }
        }
        let fill = if count > 0 { sum / count as f64 } else { global_mean };
        for j in 0..l {
            if m[[i, j]] == 0 {
                out[[i, j]] = fill;
            }
        }
    }
    out
}

/// Per-node linear interpolation in time between nearest observed neighbors,
/// constant extrapolation at the edges; fully missing nodes fall back to the
/// mean baseline.
pub fn baseline_tli(x: &Array2<f64>, m: &Array2<u8>) -> Array2<f64> {
    let (n, l) = x.dim();
    let mean_fill = baseline_mean(x, m);
    let mut out = x.clone();
    for i in 0..n {
        let observed: Vec<usize> = (0..l).filter(|&j| m[[i, j]] == 1).collect();
        if observed.is_empty() {
            for j in 0..l {
                out[[i, j]] = mean_fill[[i, j]];
            }
            continue;
        }
        for j in 0..l {
            if m[[i, j]] == 1 {
                continue;
            }
            let prev = observed.iter().rev().find(|&&o| o < j).copied();
            let next = observed.iter().find(|&&o| o > j).copied();
            out[[i, j]] = match (prev, next) {
                (Some(p), Some(q)) => {
                    let w = (j - p) as f64 / (q - p) as f64;
                    x[[i, p]] * (1.0 - w) + x[[i, q]] * w
                }
                (Some(p), None) => x[[i, p]],
                (None, Some(q)) => x[[i, q]],
                (None, None) => unreachable!("observed nonempty"),
            };
        }
    }
    out
}
