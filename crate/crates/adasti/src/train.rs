//! Training loop with the total objective, adaptive-moment updates, periodic
//! validation, and the ablation/evaluation drivers.

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{ExperimentConfig, MissingPattern};
use crate::data::{
    build_adjacency, load_matrix_csv, load_series_csv, normalized_adjacency, split_target_condition,
    window_and_normalize, GraphSpec,
};
use crate::diffusion::{pipeline_loss_on_tape, scalar_value, standard_normal};
use crate::error::{AdastiError, Result};
use crate::metrics::{evaluate_model, MetricsReport};
use crate::model::AdastiModel;
use crate::nn::{Binding, ParamStore};
use crate::synth::{ring_graph, synthetic_windows, EvalWindow};
use crate::tape::Tape;

const GRAPH_THRESHOLD: f64 = 0.1;

/// Adaptive-moment gradient descent state.
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Adam {
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn from_state(m: ParamStore, v: ParamStore, step: u64) -> Self {
        Adam { m, v, step, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name).clone();
            {
                let m = self.m.get_mut(&name);
                m.zip_mut_with(&g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            }
            {
                let v = self.v.get_mut(&name);
                v.zip_mut_with(&g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            }
            let m = self.m.get(&name).clone();
            let v = self.v.get(&name).clone();
            let p = params.get_mut(&name);
            ndarray::Zip::from(p)
                .and(&m)
                .and(&v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

pub fn zeros_like(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, value) in store.iter() {
        out.insert(name.clone(), ArrayD::zeros(value.raw_dim()));
    }
    out
}

fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Loaded dataset: masked windows with scoring targets, plus the graph.
pub struct Experiment {
    pub windows: Vec<EvalWindow>,
    pub graph: GraphSpec,
    pub a_hat: Array2<f64>,
}

pub fn load_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    if cfg.dataset == "synthetic" {
        let graph = ring_graph(crate::synth::SYNTH_NODES);
        let a_hat = normalized_adjacency(&graph);
        let windows = synthetic_windows(cfg.synthetic_windows, cfg.missing_rate, cfg.seed)?;
        return Ok(Experiment { windows, graph, a_hat });
    }
    let table = load_series_csv(std::path::Path::new(&cfg.dataset), &cfg.missing_token)?;
    let graph = if cfg.graph == "ring" {
        ring_graph(table.node_ids.len())
    } else {
        let distances = load_matrix_csv(std::path::Path::new(&cfg.graph))?;
        let built = build_adjacency(&distances, GRAPH_THRESHOLD)?;
        GraphSpec::from_adjacency(built.adjacency, table.node_ids.clone())?
    };
    if graph.adjacency.nrows() != table.node_ids.len() {
        return Err(AdastiError::contract(format!(
            "graph has {} nodes but series has {}",
            graph.adjacency.nrows(),
            table.node_ids.len()
        )));
    }
    let a_hat = normalized_adjacency(&graph);
    let samples = window_and_normalize(&table, cfg.window_len, cfg.stride, cfg.train_fraction)?;
    let mut windows = Vec::with_capacity(samples.len());
    for (w_idx, native) in samples.into_iter().enumerate() {
        let (model_mask, eval_mask) = match cfg.missing_pattern {
            MissingPattern::Native => (native.m.clone(), Array2::zeros(native.m.dim())),
            MissingPattern::Random => {
                let pat = crate::data::generate_random_mask(
                    native.m.dim(),
                    cfg.missing_rate,
                    cfg.seed.wrapping_add(w_idx as u64 * 6151),
                )?;
                overlay(&native.m, &pat)
            }
            MissingPattern::Block => {
                let pat = crate::data::generate_block_mask(
                    native.m.dim(),
                    cfg.missing_rate,
                    cfg.n_v,
                    cfg.n_t,
                    &graph,
                    cfg.seed.wrapping_add(w_idx as u64 * 6151),
                )?;
                overlay(&native.m, &pat)
            }
        };
        let truth = native.x.clone();
        let x = Array2::from_shape_fn(native.x.dim(), |ix| {
            if model_mask[ix] == 1 { native.x[ix] } else { 0.0 }
        });
        let sample = crate::data::MaskedSample { x, m: model_mask, norm_stats: native.norm_stats };
        windows.push(EvalWindow { sample, truth, eval_mask });
    }
    Ok(Experiment { windows, graph, a_hat })
}

/// Overlay a synthetic missing pattern on a native observation mask: the
/// model sees the intersection; entries hidden but natively observed are the
/// scoring targets.
fn overlay(native: &Array2<u8>, pattern: &Array2<u8>) -> (Array2<u8>, Array2<u8>) {
    let model = Array2::from_shape_fn(native.dim(), |ix| native[ix] & pattern[ix]);
    let eval = Array2::from_shape_fn(native.dim(), |ix| native[ix] & (1 - pattern[ix]));
    (model, eval)
}

/// Deterministic window split: leading fraction trains, the remainder is
/// halved into validation and test.
pub fn split_indices(total: usize, train_fraction: f64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n_train = ((total as f64 * train_fraction).round() as usize).min(total);
    let rest = total - n_train;
    let n_val = rest / 2;
    let train = (0..n_train).collect();
    let val = (n_train..n_train + n_val).collect();
    let test = (n_train + n_val..total).collect();
    (train, val, test)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
    pub val_history: Vec<(usize, f64)>,
}

const VALIDATION_K: usize = 2;
const MAX_VALIDATION_WINDOWS: usize = 8;

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let exp = load_experiment(cfg)?;
    let (train_idx, val_idx, _) = split_indices(exp.windows.len(), cfg.train_fraction);
    if train_idx.is_empty() {
        return Err(AdastiError::contract("no training windows"));
    }
    let n_nodes = exp.graph.adjacency.nrows();
    let sched = cfg.schedule()?;
    let mut model = AdastiModel::init(cfg.model_config(n_nodes), cfg.seed);
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let val_every = (cfg.epochs / 10).max(1);
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let frac = epoch as f64 / cfg.epochs as f64;
        let lr = cfg.learning_rate * if frac >= 0.9 { 0.01 } else if frac >= 0.75 { 0.1 } else { 1.0 };
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = zeros_like(&model.params);
            let mut used = 0usize;
            for &idx in batch {
                let window = &exp.windows[idx];
                let split_seed = cfg
                    .seed
                    .wrapping_mul(0x100_0000_01b3)
                    .wrapping_add((epoch * exp.windows.len() + idx) as u64);
                let pair = match split_target_condition(&window.sample.m, cfg.target_fraction, split_seed) {
                    Ok(p) => p,
                    Err(_) => continue,
                };
                if pair.target_count() == 0 {
                    continue;
                }
                let t_step = rng.gen_range(1..=sched.t_max());
                let eps = standard_normal(window.sample.x.dim(), &mut rng);
                let mut tape = Tape::new();
                let binding = Binding::register(&mut tape, &model.params);
                let loss = pipeline_loss_on_tape(
                    &mut tape,
                    &binding,
                    &model.cfg,
                    &window.sample,
                    &pair,
                    &exp.a_hat,
                    &sched,
                    cfg.lambda,
                    t_step,
                    &eps,
                )?;
                let value = scalar_value(&tape, loss.total);
                if !value.is_finite() {
                    return Err(AdastiError::Training {
                        step: global_step,
                        message: format!(
                            "non-finite loss {value} (epoch {epoch}, learning rate {lr})"
                        ),
                    });
                }
                epoch_loss += value;
                epoch_count += 1;
                let g = tape.backward(loss.total);
                for (name, var) in binding.iter() {
                    if let Some(gv) = g.get(*var) {
                        grads.get_mut(name).zip_mut_with(gv, |a, &b| *a += b);
                    }
                }
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for (_, g) in grads.iter_mut() {
                g.mapv_inplace(|v| v * scale);
            }
            let norm = grad_norm(&grads);
            if !norm.is_finite() {
                return Err(AdastiError::Training {
                    step: global_step,
                    message: format!(
                        "non-finite gradient norm {norm} (epoch {epoch}, learning rate {lr})"
                    ),
                });
            }
            adam.apply(&mut model.params, &grads, lr);
            global_step += 1;
        }
        epoch_losses.push(if epoch_count > 0 { epoch_loss / epoch_count as f64 } else { f64::NAN });

        let is_last = epoch + 1 == cfg.epochs;
        if (epoch % val_every == 0 || is_last) && !val_idx.is_empty() {
            let val_windows: Vec<EvalWindow> = val_idx
                .iter()
                .take(MAX_VALIDATION_WINDOWS)
                .map(|&i| exp.windows[i].clone())
                .collect();
            let scorable: Vec<EvalWindow> = val_windows
                .into_iter()
                .filter(|w| w.eval_mask.iter().any(|&v| v == 1))
                .collect();
            if !scorable.is_empty() {
                let acc = evaluate_model(
                    &model,
                    &scorable,
                    &exp.graph.node_ids,
                    &exp.a_hat,
                    &sched,
                    VALIDATION_K,
                    cfg.seed ^ 0x5eed_0000,
                    cfg.literal_reverse_coeffs,
                )?;
                let (val_mae, _) = acc.overall()?;
                val_history.push((epoch, val_mae));
                if best.as_ref().map_or(true, |(b, _, _)| val_mae < *b) {
                    best = Some((val_mae, epoch, model.params.clone()));
                }
            }
        }
    }

    let (best_val_mae, best_epoch, best_params) = match best {
        Some((v, e, p)) => (v, e, p),
        None => (f64::NAN, cfg.epochs.saturating_sub(1), model.params.clone()),
    };
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        n_nodes,
        epoch: best_epoch,
        best_val_mae,
        rng: RngState::capture(&rng),
        params: best_params,
        opt_m: adam.m,
        opt_v: adam.v,
        opt_step: adam.step,
    };
    Ok(TrainOutcome { checkpoint, epoch_losses, val_history })
}

/// Normalized adjacency for a configuration: the ring graph for synthetic or
/// ring experiments, otherwise the Gaussian kernel of the distance file.
pub fn a_hat_for(cfg: &ExperimentConfig, n_nodes: usize) -> Result<Array2<f64>> {
    if cfg.dataset == "synthetic" || cfg.graph == "ring" {
        return Ok(normalized_adjacency(&ring_graph(n_nodes)));
    }
    let distances = load_matrix_csv(std::path::Path::new(&cfg.graph))?;
    let graph = build_adjacency(&distances, GRAPH_THRESHOLD)?;
    Ok(normalized_adjacency(&graph))
}

/// Score a trained checkpoint on the held-out test windows of its experiment.
pub fn evaluate_checkpoint(ck: &Checkpoint, k_override: Option<usize>) -> Result<MetricsReport> {
    let cfg = &ck.config;
    let start = std::time::Instant::now();
    let exp = load_experiment(cfg)?;
    let (_, _, test_idx) = split_indices(exp.windows.len(), cfg.train_fraction);
    let test: Vec<EvalWindow> = test_idx
        .iter()
        .map(|&i| exp.windows[i].clone())
        .filter(|w| w.eval_mask.iter().any(|&v| v == 1))
        .collect();
    if test.is_empty() {
        return Err(AdastiError::contract("no scorable test windows"));
    }
    let model = ck.model();
    let sched = cfg.schedule()?;
    let k = k_override.unwrap_or(cfg.k);
    let acc = evaluate_model(
        &model,
        &test,
        &exp.graph.node_ids,
        &exp.a_hat,
        &sched,
        k,
        cfg.seed ^ 0x7e57_0000,
        cfg.literal_reverse_coeffs,
    )?;
    let (mae, rmse) = acc.overall()?;
    Ok(MetricsReport {
        mae,
        rmse,
        per_node: acc.per_node(&exp.graph.node_ids),
        config_fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Train and evaluate an ablated variant of the configuration.
pub fn run_ablation(cfg: &ExperimentConfig, variant: &str) -> Result<MetricsReport> {
    let mut ablated = cfg.clone();
    match variant {
        "no_bis4pi" => ablated.no_bis4pi = true,
        "no_gated_attention" => ablated.no_gated_attention = true,
        _ => {
            return Err(AdastiError::Config(format!(
                "unknown ablation variant '{variant}' (expected no_bis4pi or no_gated_attention)"
            )))
        }
    }
    let outcome = train(&ablated)?;
    evaluate_checkpoint(&outcome.checkpoint, None)
}
