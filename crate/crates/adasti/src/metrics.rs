//! Evaluation metrics over target entries, in denormalized sensor units, and
//! the machine-parseable key-value report format.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::diffusion::{impute, NoiseSchedule};
use crate::error::{AdastiError, Result};
use crate::model::AdastiModel;
use crate::synth::EvalWindow;

/// MAE and RMSE over entries where `mask` is 1.
pub fn masked_metrics(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
    mask: &Array2<u8>,
) -> Result<(f64, f64)> {
    if pred.dim() != truth.dim() || pred.dim() != mask.dim() {
        return Err(AdastiError::contract("metric shape mismatch"));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (ix, &m) in mask.indexed_iter() {
        if m == 1 {
            let e = pred[ix] - truth[ix];
            abs += e.abs();
            sq += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(AdastiError::contract("no target entries to score"));
    }
    Ok((abs / count as f64, (sq / count as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub per_node: Vec<(String, f64, f64)>,
    pub config_fingerprint: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    /// Key-value rendering; `wall_clock_secs` is the only run-varying field.
    pub fn to_text(&self) -> String {
        let mut s = self.essential_text();
        let _ = writeln!(s, "wall_clock_secs = {:?}", self.wall_clock_secs);
        s
    }

    /// Everything except wall clock — identical for identical (config, seed).
    pub fn essential_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mae = {:?}", self.mae);
        let _ = writeln!(s, "rmse = {:?}", self.rmse);
        let _ = writeln!(s, "config_fingerprint = {}", self.config_fingerprint);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (node, mae, rmse) in &self.per_node {
            let _ = writeln!(s, "node.{node}.mae = {mae:?}");
            let _ = writeln!(s, "node.{node}.rmse = {rmse:?}");
        }
        s
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mae = None;
        let mut rmse = None;
        let mut fingerprint = None;
        let mut seed = None;
        let mut wall = 0.0;
        let mut nodes: Vec<(String, Option<f64>, Option<f64>)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| AdastiError::contract(format!("bad report line '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| AdastiError::contract(format!("bad number '{value}' for '{key}'")))
            };
            match key {
                "mae" => mae = Some(num()?),
                "rmse" => rmse = Some(num()?),
                "config_fingerprint" => fingerprint = Some(value.to_string()),
                "seed" => {
                    seed = Some(value.parse().map_err(|_| {
                        AdastiError::contract(format!("bad seed '{value}'"))
                    })?)
                }
                "wall_clock_secs" => wall = num()?,
                _ => {
                    let rest = key.strip_prefix("node.").ok_or_else(|| {
                        AdastiError::contract(format!("unknown report key '{key}'"))
                    })?;
                    let (node, metric) = rest.rsplit_once('.').ok_or_else(|| {
                        AdastiError::contract(format!("unknown report key '{key}'"))
                    })?;
                    let entry = match nodes.iter_mut().find(|(n, _, _)| n == node) {
                        Some(e) => e,
                        None => {
                            nodes.push((node.to_string(), None, None));
                            nodes.last_mut().unwrap()
                        }
                    };
                    match metric {
                        "mae" => entry.1 = Some(num()?),
                        "rmse" => entry.2 = Some(num()?),
                        _ => {
                            return Err(AdastiError::contract(format!(
                                "unknown report key '{key}'"
                            )))
                        }
                    }
                }
            }
        }
        let per_node = nodes
            .into_iter()
            .map(|(n, a, b)| {
                Ok((
                    n.clone(),
                    a.ok_or_else(|| AdastiError::contract(format!("node {n} missing mae")))?,
                    b.ok_or_else(|| AdastiError::contract(format!("node {n} missing rmse")))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            mae: mae.ok_or_else(|| AdastiError::contract("report missing mae"))?,
            rmse: rmse.ok_or_else(|| AdastiError::contract("report missing rmse"))?,
            per_node,
            config_fingerprint: fingerprint
                .ok_or_else(|| AdastiError::contract("report missing config_fingerprint"))?,
            seed: seed.ok_or_else(|| AdastiError::contract("report missing seed"))?,
            wall_clock_secs: wall,
        })
    }
}

/// Accumulated absolute/squared error over denormalized target entries.
#[derive(Clone, Debug, Default)]
pub struct ErrorAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<usize>,
}

impl ErrorAccumulator {
    pub fn new(n_nodes: usize) -> Self {
        ErrorAccumulator {
            abs: vec![0.0; n_nodes],
            sq: vec![0.0; n_nodes],
            count: vec![0; n_nodes],
        }
    }

    pub fn add_window(
        &mut self,
        pred: &Array2<f64>,
        truth: &Array2<f64>,
        mask: &Array2<u8>,
    ) {
        for ((i, j), &m) in mask.indexed_iter() {
            if m == 1 {
                let e = pred[[i, j]] - truth[[i, j]];
                self.abs[i] += e.abs();
                self.sq[i] += e * e;
                self.count[i] += 1;
            }
        }
    }

    pub fn overall(&self) -> Result<(f64, f64)> {
        let count: usize = self.count.iter().sum();
        if count == 0 {
            return Err(AdastiError::contract("no target entries to score"));
        }
        let abs: f64 = self.abs.iter().sum();
        let sq: f64 = self.sq.iter().sum();
        Ok((abs / count as f64, (sq / count as f64).sqrt()))
    }

    pub fn per_node(&self, node_ids: &[String]) -> Vec<(String, f64, f64)> {
        node_ids
            .iter()
            .enumerate()
            .filter(|(i, _)| self.count[*i] > 0)
            .map(|(i, id)| {
                let c = self.count[i] as f64;
                (id.clone(), self.abs[i] / c, (self.sq[i] / c).sqrt())
            })
            .collect()
    }
}

/// Median-of-k imputation over `windows`, scored in denormalized units.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &AdastiModel,
    windows: &[EvalWindow],
    node_ids: &[String],
    a_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
    literal_reverse_coeffs: bool,
) -> Result<ErrorAccumulator> {
    let _ = node_ids;
    let mut acc = ErrorAccumulator::new(model.cfg.n_nodes);
    for (w_idx, window) in windows.iter().enumerate() {
        let rep_seed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(w_idx as u64);
        let result = impute(
            model,
            &window.sample,
            a_hat,
            sched,
            k,
            rep_seed,
            literal_reverse_coeffs,
        )?;
        let pred = window.sample.denormalize(&result.median)?;
        let truth = window.sample.denormalize(&window.truth)?;
        acc.add_window(&pred, &truth, &window.eval_mask);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_arithmetic_example() {
        let truth = array![[2.0, 4.0]];
        let pred = array![[3.0, 6.0]];
        let m = array![[1u8, 1]];
        let (mae, rmse) = masked_metrics(&pred, &truth, &m).unwrap();
        assert!((mae - 1.5).abs() < 1e-12);
        assert!((rmse - 2.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_zero_and_off_target_is_ignored() {
        let truth = array![[2.0, 4.0]];
        let pred = array![[2.0, 999.0]];
        let m = array![[1u8, 0]];
        let (mae, rmse) = masked_metrics(&pred, &truth, &m).unwrap();
        assert_eq!(mae, 0.0);
        assert_eq!(rmse, 0.0);
    }

    #[test]
    fn rmse_dominates_mae() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let truth = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-2.0..2.0));
            let pred = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-2.0..2.0));
            let m = Array2::from_shape_fn((3, 5), |_| rng.gen_range(0..2) as u8);
            if m.iter().all(|&v| v == 0) {
                continue;
            }
            let (mae, rmse) = masked_metrics(&pred, &truth, &m).unwrap();
            assert!(rmse >= mae - 1e-12);
        }
    }

    #[test]
    fn empty_mask_is_an_error() {
        let truth = array![[1.0]];
        let pred = array![[1.0]];
        let m = array![[0u8]];
        assert!(masked_metrics(&pred, &truth, &m).is_err());
    }

    #[test]
    fn report_round_trips() {
        let report = MetricsReport {
            mae: 0.5,
            rmse: 0.75,
            per_node: vec![("s0".into(), 0.4, 0.6), ("s1".into(), 0.6, 0.9)],
            config_fingerprint: "abcd1234".into(),
            seed: 7,
            wall_clock_secs: 12.5,
        };
        let parsed = MetricsReport::parse(&report.to_text()).unwrap();
        assert_eq!(report, parsed);
    }

    #[test]
    fn report_rejects_unknown_keys() {
        assert!(MetricsReport::parse("mae = 1\nrmse = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn accumulator_matches_direct_computation() {
        let truth = array![[1.0, 2.0], [3.0, 4.0]];
        let pred = array![[1.5, 2.0], [2.0, 6.0]];
        let m = array![[1u8, 0], [1, 1]];
        let mut acc = ErrorAccumulator::new(2);
        acc.add_window(&pred, &truth, &m);
        let (mae, rmse) = acc.overall().unwrap();
        let (dm, dr) = masked_metrics(&pred, &truth, &m).unwrap();
        assert_eq!(mae, dm);
        assert_eq!(rmse, dr);
        let per = acc.per_node(&["a".into(), "b".into()]);
        assert_eq!(per.len(), 2);
        assert!((per[0].1 - 0.5).abs() < 1e-12);
        assert!((per[1].1 - 1.5).abs() < 1e-12);
    }
}
