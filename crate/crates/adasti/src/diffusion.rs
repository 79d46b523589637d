//! Noise schedules, forward noising, the conditional training loss, reverse
//! ancestral sampling and median-of-k imputation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::baseline::baseline_tli;
use crate::data::{evaluation_mask_pair, MaskPair, MaskedSample};
use crate::error::{AdastiError, Result};
use crate::model::AdastiModel;
use crate::model::ModelConfig;
use crate::nast::{epsilon_theta, DenoiserInput};
use crate::nn::{mask_to_f64, masked_mse, ones_count, Binding};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Quadratic,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleKind::Linear),
            "quadratic" => Some(ScheduleKind::Quadratic),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Quadratic => "quadratic",
        }
    }
}

/// Per-step noise levels; all vectors are indexed by t-1 for t in [1,T].
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_hat: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(AdastiError::contract(format!(
                "diffusion step {t} outside [1, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// β interpolated linearly, or quadratically in √β; ᾱ_0 = 1 for β̂_1.
pub fn make_schedule(
    t_max: usize,
    beta_min: f64,
    beta_max: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(AdastiError::contract("schedule needs at least one step"));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(AdastiError::contract(format!(
            "beta bounds ({beta_min}, {beta_max}) must satisfy 0 < min < max < 1"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| {
            let frac = if t_max == 1 { 1.0 } else { i as f64 / (t_max - 1) as f64 };
            match kind {
                ScheduleKind::Linear => beta_min + (beta_max - beta_min) * frac,
                ScheduleKind::Quadratic => {
                    let s = beta_min.sqrt() + (beta_max.sqrt() - beta_min.sqrt()) * frac;
                    s * s
                }
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let beta_hat: Vec<f64> = (0..t_max)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar, beta_hat })
}

/// Forward noising restricted to target entries: √ᾱ_t X_0 + √(1−ᾱ_t) ε on
/// M_ta, zero elsewhere.
pub fn q_sample(
    x0: &Array2<f64>,
    m_ta: &Array2<u8>,
    t: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar[t - 1];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Array2::from_shape_fn(x0.dim(), |ix| {
        if m_ta[ix] == 1 {
            sa * x0[ix] + sb * eps[ix]
        } else {
            0.0
        }
    }))
}

/// One ancestral sampling step on M_ta entries. `literal` reproduces the
/// printed-coefficient variant (1/α_t, √(1−α_t), no bars) instead of the
/// standard DDPM posterior.
pub fn reverse_step(
    x_t: &Array2<f64>,
    eps_hat: &Array2<f64>,
    m_ta: &Array2<u8>,
    t: usize,
    z: &Array2<f64>,
    sched: &NoiseSchedule,
    literal: bool,
) -> Result<Array2<f64>> {
    sched.check_step(t)?;
    let i = t - 1;
    let (inv_scale, eps_coef, var) = if literal {
        let alpha_prev = if i == 0 { 1.0 } else { sched.alpha[i - 1] };
        let bh = (1.0 - alpha_prev) / (1.0 - sched.alpha[i]) * sched.beta[i];
        (
            1.0 / sched.alpha[i],
            (1.0 - sched.alpha[i]).sqrt(),
            bh,
        )
    } else {
        (
            1.0 / sched.alpha[i].sqrt(),
            sched.beta[i] / (1.0 - sched.alpha_bar[i]).sqrt(),
            sched.beta_hat[i],
        )
    };
    let sigma = var.max(0.0).sqrt();
    Ok(Array2::from_shape_fn(x_t.dim(), |ix| {
        if m_ta[ix] == 1 {
            let mean = inv_scale * (x_t[ix] - eps_coef * eps_hat[ix]);
            let noise = if t == 1 { 0.0 } else { z[ix] };
            mean + sigma * noise
        } else {
            x_t[ix]
        }
    }))
}

/// All loss terms of one training example, composed on a single tape.
pub struct PipelineLoss {
    pub total: Var,
    pub diffusion: Var,
    pub rec_f: Var,
    pub rec_b: Var,
    pub cons: Var,
}

/// Full pipeline (pre-imputation → conditionalizer → denoiser) with the
/// diffusion step `t_step` and noise `eps` injected for determinism.
#[allow(clippy::too_many_arguments)]
pub fn pipeline_loss_on_tape(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    sample: &MaskedSample,
    pair: &MaskPair,
    a_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    lambda: f64,
    t_step: usize,
    eps: &Array2<f64>,
) -> Result<PipelineLoss> {
    if lambda < 0.0 {
        return Err(AdastiError::contract("lambda must be nonnegative"));
    }
    let target_count = ones_count(&pair.m_ta);
    if target_count == 0 {
        return Err(AdastiError::contract("empty target mask in training loss"));
    }
    let m_co_f = mask_to_f64(&pair.m_co);
    let x_cond_arr = &sample.x * &m_co_f;
    let a_var = tape.leaf2(a_hat.clone());
    let x_var = tape.leaf2(x_cond_arr.clone());
    let m_var = tape.leaf2(m_co_f.clone());
    let omm_arr = m_co_f.mapv(|v| 1.0 - v);
    let omm_var = tape.leaf2(omm_arr);

    let (x_c, pre) = if cfg.no_bis4pi {
        let filled = baseline_tli(&x_cond_arr, &pair.m_co);
        (tape.leaf2(filled), None)
    } else {
        let pre = crate::bis4pi::forward(tape, binding, cfg, x_var, m_var, omm_var)?;
        (pre.x_c, Some(pre))
    };
    let stc = crate::stc::forward(tape, binding, cfg, x_c, a_var)?;

    let x_ta_t = q_sample(&sample.x, &pair.m_ta, t_step, eps, sched)?;
    let input = DenoiserInput {
        x_ta_t: &x_ta_t,
        m_ta: &pair.m_ta,
        m_co: &pair.m_co,
        t: t_step,
        t_max: sched.t_max(),
    };
    let eps_hat = epsilon_theta(tape, binding, cfg, &input, x_c, stc.u, a_var)?;
    let eps_leaf = tape.leaf2(eps.clone());
    let m_ta_leaf = tape.leaf2(mask_to_f64(&pair.m_ta));
    let diffusion = masked_mse(tape, eps_hat, eps_leaf, m_ta_leaf, target_count);

    let (rec_f, rec_b, cons) = match &pre {
        Some(pre) => {
            let obs = ones_count(&pair.m_co);
            let missing = pair.m_co.len() - obs;
            let rec_f = crate::bis4pi::reconstruction_loss(tape, cfg, x_var, m_var, obs, &pre.trace_f)?;
            let rec_b = crate::bis4pi::reconstruction_loss(tape, cfg, x_var, m_var, obs, &pre.trace_b)?;
            let cons = crate::bis4pi::consistency_loss(tape, pre, omm_var, missing);
            (rec_f, rec_b, cons)
        }
        None => (tape.scalar(0.0), tape.scalar(0.0), tape.scalar(0.0)),
    };
    let s1 = tape.add(rec_f, rec_b);
    let s2 = tape.add(s1, cons);
    let weighted = tape.scale(s2, lambda);
    let total = tape.add(diffusion, weighted);
    Ok(PipelineLoss { total, diffusion, rec_f, rec_b, cons })
}

/// Value of a rank-0 (or single-element) tape node.
pub fn scalar_value(tape: &Tape, v: Var) -> f64 {
    let arr = tape.value(v);
    debug_assert_eq!(arr.len(), 1);
    *arr.iter().next().unwrap()
}

/// Seed-deterministic diffusion term of the loss (λ = 0 pipeline).
pub fn diffusion_training_loss(
    model: &AdastiModel,
    sample: &MaskedSample,
    pair: &MaskPair,
    a_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_step = rng.gen_range(1..=sched.t_max());
    let eps = standard_normal(sample.x.dim(), &mut rng);
    let mut tape = Tape::new();
    let binding = Binding::register(&mut tape, &model.params);
    let loss = pipeline_loss_on_tape(
        &mut tape, &binding, &model.cfg, sample, pair, a_hat, sched, 0.0, t_step, &eps,
    )?;
    Ok(scalar_value(&tape, loss.diffusion))
}

pub fn standard_normal(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Samples, their per-entry median, and the evaluation target mask.
#[derive(Clone, Debug)]
pub struct ImputationResult {
    pub samples: Vec<Array2<f64>>,
    pub median: Array2<f64>,
    pub m_ta: Array2<u8>,
}

/// Entrywise median; even counts average the two middle order statistics.
pub fn entrywise_median(samples: &[Array2<f64>]) -> Array2<f64> {
    assert!(!samples.is_empty());
    let k = samples.len();
    Array2::from_shape_fn(samples[0].dim(), |ix| {
        let mut vals: Vec<f64> = samples.iter().map(|s| s[ix]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if k % 2 == 1 {
            vals[k / 2]
        } else {
            (vals[k / 2 - 1] + vals[k / 2]) / 2.0
        }
    })
}

/// Median-of-k conditional imputation. The pre-imputation and conditional
/// tensor are computed once; the k reverse chains use independent RNG streams
/// derived from (seed, repetition) so results are order-independent.
pub fn impute(
    model: &AdastiModel,
    sample: &MaskedSample,
    a_hat: &Array2<f64>,
    sched: &NoiseSchedule,
    k: usize,
    seed: u64,
    literal_reverse_coeffs: bool,
) -> Result<ImputationResult> {
    if k == 0 {
        return Err(AdastiError::contract("sample count k must be positive"));
    }
    let cfg = &model.cfg;
    let pair = evaluation_mask_pair(&sample.m);
    let dim = sample.x.dim();

    // conditional context, shared by all repetitions
    let (x_c_arr, u_arr) = {
        let mut tape = Tape::new();
        let binding = Binding::register(&mut tape, &model.params);
        let a_var = tape.leaf2(a_hat.clone());
        let x_var = tape.leaf2(sample.x.clone());
        let m_f = mask_to_f64(&sample.m);
        let m_var = tape.leaf2(m_f.clone());
        let omm_var = tape.leaf2(m_f.mapv(|v| 1.0 - v));
        let x_c = if cfg.no_bis4pi {
            let filled = baseline_tli(&sample.x, &sample.m);
            tape.leaf2(filled)
        } else {
            crate::bis4pi::forward(&mut tape, &binding, cfg, x_var, m_var, omm_var)?.x_c
        };
        let stc = crate::stc::forward(&mut tape, &binding, cfg, x_c, a_var)?;
        (tape.value(x_c).clone(), tape.value(stc.u).clone())
    };

    let mut samples = Vec::with_capacity(k);
    for rep in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep as u64 + 1);
        let init = standard_normal(dim, &mut rng);
        let mut x_t = Array2::from_shape_fn(dim, |ix| if pair.m_ta[ix] == 1 { init[ix] } else { 0.0 });
        for t in (1..=sched.t_max()).rev() {
            let mut tape = Tape::new();
            let binding = Binding::register(&mut tape, &model.params);
            let a_var = tape.leaf2(a_hat.clone());
            let x_c_var = tape.leaf(x_c_arr.clone());
            let u_var = tape.leaf(u_arr.clone());
            let input = DenoiserInput {
                x_ta_t: &x_t,
                m_ta: &pair.m_ta,
                m_co: &pair.m_co,
                t,
                t_max: sched.t_max(),
            };
            let eps_hat = epsilon_theta(&mut tape, &binding, cfg, &input, x_c_var, u_var, a_var)?;
            let eps_arr = tape
                .value(eps_hat)
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("denoiser output is 2-D");
            let z = if t > 1 {
                standard_normal(dim, &mut rng)
            } else {
                Array2::zeros(dim)
            };
            x_t = reverse_step(&x_t, &eps_arr, &pair.m_ta, t, &z, sched, literal_reverse_coeffs)?;
        }
        samples.push(crate::bis4pi::masked_replace(&sample.x, &sample.m, &x_t)?);
    }
    let median_raw = entrywise_median(&samples);
    let median = crate::bis4pi::masked_replace(&sample.x, &sample.m, &median_raw)?;
    Ok(ImputationResult { samples, median, m_ta: pair.m_ta })
}
