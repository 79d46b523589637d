//! Noise-aware spatio-temporal denoiser: gated self/cross attention and GCN
//! blocks inside a DiffWave-style residual stack implementing the noise
//! estimator.

use ndarray::{Array1, Array2};

use crate::error::{AdastiError, Result};
use crate::model::{AuxPlacement, ModelConfig};
use crate::nn::{
    self, cross_attention, init_cross_attention, init_gcn, init_layer_norm, init_mlp,
    init_self_attention, layer_norm, linear_last, mask_to_f64, mlp, self_attention,
    sinusoidal_table, Binding, Init, ParamStore,
};
use crate::tape::{Tape, Var};

/// Constant inputs of the noise estimator; the differentiable inputs (X_c and
/// U) travel separately as tape variables.
pub struct DenoiserInput<'a> {
    /// Noisy target, zeros off-target, (N,L).
    pub x_ta_t: &'a Array2<f64>,
    pub m_ta: &'a Array2<u8>,
    pub m_co: &'a Array2<u8>,
    /// Diffusion step, 1-based.
    pub t: usize,
    /// Total diffusion steps T.
    pub t_max: usize,
}

pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) {
    let c = cfg.channels;
    let e = cfg.step_embed_dim;
    store.insert("nast.in.w", init.scaled(&[c, 4], 4));
    store.insert("nast.in.b", init.zeros(&[c]));
    store.insert("nast.step.w1", init.scaled(&[e, e], e));
    store.insert("nast.step.b1", init.zeros(&[e]));
    store.insert("nast.step.w2", init.scaled(&[e, e], e));
    store.insert("nast.step.b2", init.zeros(&[e]));
    for i in 0..cfg.residual_layers {
        let li = format!("nast.layer{i}");
        store.insert(format!("{li}.step.w"), init.scaled(&[e, c], e));
        store.insert(format!("{li}.step.b"), init.zeros(&[c]));
        init_gate_attn(store, init, cfg, &format!("{li}.tem"));
        init_gcn(store, init, &format!("{li}.gcn"), c, c);
        init_layer_norm(store, init, &format!("{li}.ln_gcn"), c);
        init_gate_attn(store, init, cfg, &format!("{li}.spa"));
        init_layer_norm(store, init, &format!("{li}.ln_spa"), c);
        init_mlp(store, init, &format!("{li}.mlp"), c, cfg.mlp_width, c);
        init_layer_norm(store, init, &format!("{li}.ln_out"), c);
        store.insert(format!("{li}.split.w"), init.scaled(&[2 * c, c], c));
        store.insert(format!("{li}.split.b"), init.zeros(&[2 * c]));
        store.insert(format!("{li}.res.w"), init.scaled(&[c, c], c));
        store.insert(format!("{li}.res.b"), init.zeros(&[c]));
        store.insert(format!("{li}.skip.w"), init.scaled(&[c, c], c));
        store.insert(format!("{li}.skip.b"), init.zeros(&[c]));
        if cfg.aux_block == AuxPlacement::Nast {
            crate::aux_block::init_params(store, init, cfg, &format!("{li}.aux"));
        }
    }
    store.insert("nast.out1.w", init.scaled(&[c, c], c));
    store.insert("nast.out1.b", init.zeros(&[c]));
    store.insert("nast.out2.w", init.scaled(&[1, c], c));
    store.insert("nast.out2.b", init.zeros(&[1]));
}

fn init_gate_attn(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, prefix: &str) {
    let c = cfg.channels;
    init_cross_attention(store, init, &format!("{prefix}.cross"), c);
    if !cfg.no_gated_attention {
        init_self_attention(store, init, &format!("{prefix}.self"), c);
        store.insert(format!("{prefix}.gate.w1"), init.scaled(&[c, c], c));
        store.insert(format!("{prefix}.gate.w2"), init.scaled(&[c, c], c));
        store.insert(format!("{prefix}.gate.b"), init.zeros(&[c]));
    }
}

/// R = G ⊙ R_self + (1−G) ⊙ R_cross over (B,S,C) tokens, with
/// G = σ(R_self W_g1 + R_cross W_g2 + b_g). Falls back to plain
/// cross-attention under the `no_gated_attention` ablation.
pub fn gated_attention(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x_tok: Var,
    u_tok: Var,
) -> Var {
    let r_cross = cross_attention(tape, binding, &format!("{prefix}.cross"), x_tok, u_tok, cfg.heads);
    if cfg.no_gated_attention {
        return r_cross;
    }
    let r_self = self_attention(tape, binding, &format!("{prefix}.self"), x_tok, cfg.heads);
    let g1 = linear_last(tape, r_self, binding.var(&format!("{prefix}.gate.w1")), None);
    let g2 = linear_last(
        tape,
        r_cross,
        binding.var(&format!("{prefix}.gate.w2")),
        Some(binding.var(&format!("{prefix}.gate.b"))),
    );
    let pre = tape.add(g1, g2);
    let g = tape.sigmoid(pre);
    // direct convex blend so a saturated gate reproduces a branch exactly
    let gs = tape.mul(g, r_self);
    let neg = tape.scale(g, -1.0);
    let one_minus_g = tape.add_scalar(neg, 1.0);
    let gc = tape.mul(one_minus_g, r_cross);
    tape.add(gs, gc)
}

/// Branch outputs of one NAST block, all (C,N,L).
pub struct NastTrace {
    pub x_tem: Var,
    pub x_gcn: Var,
    pub x_spa: Var,
    pub out: Var,
}

fn tem_tokens(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, vec![1, 2, 0])
}

fn from_tem_tokens(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, vec![2, 0, 1])
}

fn spa_tokens(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, vec![2, 1, 0])
}

/// One NAST block: gated temporal attention, then parallel GCN and gated
/// spatial attention, fused through a normed MLP.
pub fn nast_forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    u: Var,
    a_hat: Var,
) -> Result<NastTrace> {
    // temporal gated attention
    let x_tok = tem_tokens(tape, x);
    let u_tok = tem_tokens(tape, u);
    let (x_in_tok, u_in_tok) = if cfg.temporal_pos_encoding {
        let pos = tape.leaf2(sinusoidal_table(cfg.window_len, cfg.channels));
        (tape.add(x_tok, pos), tape.add(u_tok, pos))
    } else {
        (x_tok, u_tok)
    };
    let tem_tok = gated_attention(tape, binding, cfg, &format!("{prefix}.tem"), x_in_tok, u_in_tok);
    let mut x_tem = from_tem_tokens(tape, tem_tok);
    if cfg.aux_block == AuxPlacement::Nast {
        x_tem = crate::aux_block::forward(tape, binding, cfg, &format!("{prefix}.aux"), x_tem, a_hat)?;
    }

    // graph branch
    let g = nn::gcn(tape, binding, &format!("{prefix}.gcn"), x_tem, a_hat);
    let g_res = tape.add(g, x_tem);
    let g_tok = tem_tokens(tape, g_res);
    let g_norm = layer_norm(tape, binding, &format!("{prefix}.ln_gcn"), g_tok);
    let x_gcn = from_tem_tokens(tape, g_norm);

    // spatial branch
    let s_tok = spa_tokens(tape, x_tem);
    let u_spa = spa_tokens(tape, u);
    let s_attn = gated_attention(tape, binding, cfg, &format!("{prefix}.spa"), s_tok, u_spa);
    let s_res = tape.add(s_attn, s_tok);
    let s_norm = layer_norm(tape, binding, &format!("{prefix}.ln_spa"), s_res);
    let x_spa = spa_tokens(tape, s_norm);

    // fusion
    let sum = tape.add(x_gcn, x_spa);
    let f_tok = tem_tokens(tape, sum);
    let f_mlp = mlp(tape, binding, &format!("{prefix}.mlp"), f_tok);
    let f_norm = layer_norm(tape, binding, &format!("{prefix}.ln_out"), f_mlp);
    let out = from_tem_tokens(tape, f_norm);
    Ok(NastTrace { x_tem, x_gcn, x_spa, out })
}

/// Sinusoidal embedding of step t (constant part).
pub fn step_embedding_base(t: usize, dim: usize, t_max: usize) -> Result<Array1<f64>> {
    if t < 1 || t > t_max {
        return Err(AdastiError::contract(format!(
            "diffusion step {t} outside [1, {t_max}]"
        )));
    }
    let table = sinusoidal_table(t_max + 1, dim);
    Ok(table.row(t).to_owned())
}

/// Full trainable step embedding: sinusoid followed by two affine+SiLU maps.
/// Returns a (1,E) tape variable.
pub fn diffusion_step_embedding(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    t: usize,
    t_max: usize,
) -> Result<Var> {
    let base = step_embedding_base(t, cfg.step_embed_dim, t_max)?;
    let e0 = tape.leaf(base.into_dyn());
    let e0 = tape.reshape(e0, vec![1, cfg.step_embed_dim]);
    let h1 = linear_last(tape, e0, binding.var("nast.step.w1"), Some(binding.var("nast.step.b1")));
    let h1 = silu(tape, h1);
    let h2 = linear_last(tape, h1, binding.var("nast.step.w2"), Some(binding.var("nast.step.b2")));
    Ok(silu(tape, h2))
}

fn silu(tape: &mut Tape, x: Var) -> Var {
    let s = tape.sigmoid(x);
    tape.mul(x, s)
}

/// Channel map on a (Cin,N,L) tensor with `{prefix}.w` (Cout,Cin) and
/// `{prefix}.b` (Cout).
fn conv1x1(tape: &mut Tape, binding: &Binding, prefix: &str, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (c, n, l) = (shape[0], shape[1], shape[2]);
    let w = binding.var(&format!("{prefix}.w"));
    let cout = tape.value(w).shape()[0];
    let flat = tape.reshape(x, vec![c, n * l]);
    let mapped = tape.matmul(w, flat);
    let out = tape.reshape(mapped, vec![cout, n, l]);
    let b = binding.var(&format!("{prefix}.b"));
    let b3 = tape.reshape(b, vec![cout, 1, 1]);
    tape.add(out, b3)
}

/// Noise estimate ε_θ. The noisy target and masks are constants; `x_c` and
/// `u` are live tape variables so gradients reach BiS4PI and STC.
pub fn epsilon_theta(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    input: &DenoiserInput,
    x_c: Var,
    u: Var,
    a_hat: Var,
) -> Result<Var> {
    if input.t < 1 || input.t > input.t_max {
        return Err(AdastiError::contract(format!(
            "diffusion step {} outside [1, {}]",
            input.t, input.t_max
        )));
    }
    let (n, l) = input.x_ta_t.dim();
    let c = cfg.channels;
    let ch0 = tape.leaf2(input.x_ta_t.clone());
    let ch0 = tape.reshape(ch0, vec![1, n, l]);
    let ch1 = tape.reshape(x_c, vec![1, n, l]);
    let ch2 = tape.leaf2(mask_to_f64(input.m_ta));
    let ch2 = tape.reshape(ch2, vec![1, n, l]);
    let ch3 = tape.leaf2(mask_to_f64(input.m_co));
    let ch3 = tape.reshape(ch3, vec![1, n, l]);
    let stacked = tape.concat(&[ch0, ch1, ch2, ch3], 0);
    let mut x = conv1x1(tape, binding, "nast.in", stacked);

    let emb = diffusion_step_embedding(tape, binding, cfg, input.t, input.t_max)?;
    let mut skips: Option<Var> = None;
    for i in 0..cfg.residual_layers {
        let li = format!("nast.layer{i}");
        let proj = linear_last(
            tape,
            emb,
            binding.var(&format!("{li}.step.w")),
            Some(binding.var(&format!("{li}.step.b"))),
        );
        let proj3 = tape.reshape(proj, vec![c, 1, 1]);
        let h = tape.add(x, proj3);
        let trace = nast_forward(tape, binding, cfg, &li, h, u, a_hat)?;
        let split = conv1x1(tape, binding, &format!("{li}.split"), trace.out);
        let filt = tape.slice(split, 0, 0, c);
        let gate = tape.slice(split, 0, c, c);
        let tf = tape.tanh(filt);
        let sg = tape.sigmoid(gate);
        let z = tape.mul(tf, sg);
        let res = conv1x1(tape, binding, &format!("{li}.res"), z);
        let skip = conv1x1(tape, binding, &format!("{li}.skip"), z);
        let sum = tape.add(x, res);
        x = tape.scale(sum, std::f64::consts::FRAC_1_SQRT_2);
        skips = Some(match skips {
            Some(s) => tape.add(s, skip),
            None => skip,
        });
    }
    let skip_sum = skips.expect("at least one residual layer");
    let scaled = tape.scale(skip_sum, 1.0 / (cfg.residual_layers as f64).sqrt());
    let h = tape.relu(scaled);
    let h = conv1x1(tape, binding, "nast.out1", h);
    let h = tape.relu(h);
    let out = conv1x1(tape, binding, "nast.out2", h);
    Ok(tape.reshape(out, vec![n, l]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_a_hat(n: usize) -> Array2<f64> {
        let mut adj = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            adj[[i, (i + 1) % n]] = 1.0;
            adj[[(i + 1) % n, i]] = 1.0;
        }
        let g = crate::data::GraphSpec::from_adjacency(
            adj,
            (0..n).map(|i| format!("n{i}")).collect(),
        )
        .unwrap();
        crate::data::normalized_adjacency(&g)
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        init_params(&mut store, &mut init, cfg);
        store
    }

    fn gate_fixture(
        cfg: &ModelConfig,
        store: &ParamStore,
        seed: u64,
    ) -> (Tape, Binding, Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let x0 = init.normal(&[2, 4, cfg.channels], 1.0);
        let u0 = init.normal(&[2, 4, cfg.channels], 1.0);
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, store);
        let x = t.leaf(x0);
        let u = t.leaf(u0);
        (t, binding, x, u)
    }

    #[test]
    fn gate_saturated_high_returns_self_attention() {
        let cfg = ModelConfig::tiny(3, 4);
        let mut store = setup(&cfg, 1);
        store.get_mut("nast.layer0.tem.gate.w1").fill(0.0);
        store.get_mut("nast.layer0.tem.gate.w2").fill(0.0);
        store.get_mut("nast.layer0.tem.gate.b").fill(50.0);
        let (mut t, binding, x, u) = gate_fixture(&cfg, &store, 2);
        let r = gated_attention(&mut t, &binding, &cfg, "nast.layer0.tem", x, u);
        let r_self = self_attention(&mut t, &binding, "nast.layer0.tem.self", x, cfg.heads);
        for (a, b) in t.value(r).iter().zip(t.value(r_self).iter()) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn gate_saturated_low_returns_cross_attention() {
        let cfg = ModelConfig::tiny(3, 4);
        let mut store = setup(&cfg, 3);
        store.get_mut("nast.layer0.tem.gate.w1").fill(0.0);
        store.get_mut("nast.layer0.tem.gate.w2").fill(0.0);
        store.get_mut("nast.layer0.tem.gate.b").fill(-50.0);
        let (mut t, binding, x, u) = gate_fixture(&cfg, &store, 4);
        let r = gated_attention(&mut t, &binding, &cfg, "nast.layer0.tem", x, u);
        let r_cross = cross_attention(&mut t, &binding, "nast.layer0.tem.cross", x, u, cfg.heads);
        for (a, b) in t.value(r).iter().zip(t.value(r_cross).iter()) {
            assert!((a - b).abs() < 1e-20);
        }
    }

    #[test]
    fn zero_gate_preactivation_averages_branches() {
        let cfg = ModelConfig::tiny(3, 4);
        let mut store = setup(&cfg, 5);
        store.get_mut("nast.layer0.tem.gate.w1").fill(0.0);
        store.get_mut("nast.layer0.tem.gate.w2").fill(0.0);
        store.get_mut("nast.layer0.tem.gate.b").fill(0.0);
        let (mut t, binding, x, u) = gate_fixture(&cfg, &store, 6);
        let r = gated_attention(&mut t, &binding, &cfg, "nast.layer0.tem", x, u);
        let r_self = self_attention(&mut t, &binding, "nast.layer0.tem.self", x, cfg.heads);
        let r_cross = cross_attention(&mut t, &binding, "nast.layer0.tem.cross", x, u, cfg.heads);
        let rv = t.value(r).clone();
        for ((a, s), c) in rv.iter().zip(t.value(r_self).iter()).zip(t.value(r_cross).iter()) {
            assert!((a - (s + c) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gated_output_lies_between_branches() {
        let cfg = ModelConfig::tiny(3, 4);
        let store = setup(&cfg, 7);
        let (mut t, binding, x, u) = gate_fixture(&cfg, &store, 8);
        let r = gated_attention(&mut t, &binding, &cfg, "nast.layer0.spa", x, u);
        let r_self = self_attention(&mut t, &binding, "nast.layer0.spa.self", x, cfg.heads);
        let r_cross = cross_attention(&mut t, &binding, "nast.layer0.spa.cross", x, u, cfg.heads);
        let rv = t.value(r).clone();
        for ((a, s), c) in rv.iter().zip(t.value(r_self).iter()).zip(t.value(r_cross).iter()) {
            let lo = s.min(*c) - 1e-12;
            let hi = s.max(*c) + 1e-12;
            assert!(*a >= lo && *a <= hi);
        }
    }

    #[test]
    fn block_wiring_zeroed_gcn_reduces_to_normed_x_tem() {
        let cfg = ModelConfig::tiny(3, 5);
        let mut store = setup(&cfg, 9);
        store.get_mut("nast.layer0.gcn.w").fill(0.0);
        store.get_mut("nast.layer0.gcn.b").fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut init = Init { rng: &mut rng };
        let x0 = init.normal(&[cfg.channels, 3, 5], 1.0);
        let u0 = init.normal(&[cfg.channels, 3, 5], 1.0);
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let a_hat = t.leaf2(ring_a_hat(3));
        let x = t.leaf(x0);
        let u = t.leaf(u0);
        let trace = nast_forward(&mut t, &binding, &cfg, "nast.layer0", x, u, a_hat).unwrap();
        assert_eq!(t.value(trace.out).shape(), &[cfg.channels, 3, 5]);
        let tok = tem_tokens(&mut t, trace.x_tem);
        let normed = layer_norm(&mut t, &binding, "nast.layer0.ln_gcn", tok);
        let expect = from_tem_tokens(&mut t, normed);
        for (a, b) in t.value(trace.x_gcn).iter().zip(t.value(expect).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn step_embedding_deterministic_distinct_and_sized() {
        let cfg = ModelConfig::tiny(3, 4);
        let store = setup(&cfg, 11);
        let t_max = 20;
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for step in 1..=t_max {
            let base = step_embedding_base(step, cfg.step_embed_dim, t_max).unwrap();
            assert_eq!(base.len(), cfg.step_embed_dim);
            let again = step_embedding_base(step, cfg.step_embed_dim, t_max).unwrap();
            assert_eq!(base, again);
            let v: Vec<f64> = base.iter().copied().collect();
            for prev in &seen {
                let same = prev.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12);
                assert!(!same, "steps collide");
            }
            seen.push(v);
        }
        assert!(step_embedding_base(0, 8, t_max).is_err());
        assert!(step_embedding_base(t_max + 1, 8, t_max).is_err());
        // trainable head runs and is deterministic
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let e1 = diffusion_step_embedding(&mut t, &binding, &cfg, 3, t_max).unwrap();
        let e2 = diffusion_step_embedding(&mut t, &binding, &cfg, 3, t_max).unwrap();
        assert_eq!(t.value(e1), t.value(e2));
    }

    fn eps_fixture(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (Array2<f64>, Array2<u8>, Array2<u8>, ArrayD<f64>, ArrayD<f64>) {
        let n = cfg.n_nodes;
        let l = cfg.window_len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let x_ta = Array2::from_shape_fn((n, l), |(i, j)| {
            init.normal(&[1], 1.0)[[0]] * (((i + j) % 2) as f64)
        });
        let m_ta = Array2::from_shape_fn((n, l), |(i, j)| ((i + j) % 2) as u8);
        let m_co = Array2::from_shape_fn((n, l), |(i, j)| ((i + j + 1) % 2) as u8);
        let x_c = init.normal(&[n, l], 1.0);
        let u = init.normal(&[cfg.channels, n, l], 1.0);
        (x_ta, m_ta, m_co, x_c, u)
    }

    fn run_eps(
        cfg: &ModelConfig,
        store: &ParamStore,
        x_ta: &Array2<f64>,
        m_ta: &Array2<u8>,
        m_co: &Array2<u8>,
        x_c: &ArrayD<f64>,
        u: &ArrayD<f64>,
        a_hat: &Array2<f64>,
        t_step: usize,
    ) -> Array2<f64> {
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, store);
        let a = t.leaf2(a_hat.clone());
        let xc = t.leaf(x_c.clone());
        let uv = t.leaf(u.clone());
        let input = DenoiserInput { x_ta_t: x_ta, m_ta, m_co, t: t_step, t_max: 10 };
        let out = epsilon_theta(&mut t, &binding, cfg, &input, xc, uv, a).unwrap();
        let v = t.value(out).clone();
        v.into_dimensionality::<ndarray::Ix2>().unwrap()
    }

    #[test]
    fn epsilon_theta_deterministic_shaped_and_condition_sensitive() {
        let cfg = ModelConfig::tiny(3, 4);
        let store = setup(&cfg, 12);
        let (x_ta, m_ta, m_co, x_c, u) = eps_fixture(&cfg, 13);
        let a_hat = ring_a_hat(3);
        let o1 = run_eps(&cfg, &store, &x_ta, &m_ta, &m_co, &x_c, &u, &a_hat, 2);
        assert_eq!(o1.dim(), (3, 4));
        assert!(o1.iter().all(|v| v.is_finite()));
        let o2 = run_eps(&cfg, &store, &x_ta, &m_ta, &m_co, &x_c, &u, &a_hat, 2);
        assert_eq!(o1, o2);
        let mut u2 = u.clone();
        u2[[0, 0, 0]] += 1.0;
        let o3 = run_eps(&cfg, &store, &x_ta, &m_ta, &m_co, &x_c, &u2, &a_hat, 2);
        let delta: f64 = o1.iter().zip(o3.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 0.0, "conditioning path is dead");
        // different step changes the output
        let o4 = run_eps(&cfg, &store, &x_ta, &m_ta, &m_co, &x_c, &u, &a_hat, 7);
        assert_ne!(o1, o4);
    }

    #[test]
    fn epsilon_theta_rejects_out_of_range_step() {
        let cfg = ModelConfig::tiny(3, 4);
        let store = setup(&cfg, 14);
        let (x_ta, m_ta, m_co, x_c, u) = eps_fixture(&cfg, 15);
        let a_hat = ring_a_hat(3);
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let a = t.leaf2(a_hat);
        let xc = t.leaf(x_c);
        let uv = t.leaf(u);
        let input = DenoiserInput { x_ta_t: &x_ta, m_ta: &m_ta, m_co: &m_co, t: 11, t_max: 10 };
        assert!(epsilon_theta(&mut t, &binding, &cfg, &input, xc, uv, a).is_err());
    }

    #[test]
    fn node_permutation_consistency() {
        let cfg = ModelConfig::tiny(4, 5);
        let store = setup(&cfg, 16);
        let (x_ta, m_ta, m_co, x_c, u) = eps_fixture(&cfg, 17);
        let a_hat = ring_a_hat(4);
        let base = run_eps(&cfg, &store, &x_ta, &m_ta, &m_co, &x_c, &u, &a_hat, 3);
        let perm = [2usize, 0, 3, 1];
        let px_ta = Array2::from_shape_fn((4, 5), |(i, j)| x_ta[[perm[i], j]]);
        let pm_ta = Array2::from_shape_fn((4, 5), |(i, j)| m_ta[[perm[i], j]]);
        let pm_co = Array2::from_shape_fn((4, 5), |(i, j)| m_co[[perm[i], j]]);
        let px_c = ArrayD::from_shape_fn(IxDyn(&[4, 5]), |ix| x_c[[perm[ix[0]], ix[1]]]);
        let pu = ArrayD::from_shape_fn(IxDyn(&[cfg.channels, 4, 5]), |ix| {
            u[[ix[0], perm[ix[1]], ix[2]]]
        });
        let pa = Array2::from_shape_fn((4, 4), |(i, j)| a_hat[[perm[i], perm[j]]]);
        let out = run_eps(&cfg, &store, &px_ta, &pm_ta, &pm_co, &px_c, &pu, &pa, 3);
        for i in 0..4 {
            for j in 0..5 {
                assert!(
                    (out[[i, j]] - base[[perm[i], j]]).abs() < 1e-9,
                    "({i},{j})"
                );
            }
        }
    }

    #[test]
    fn no_gated_attention_drops_gate_parameters() {
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.no_gated_attention = true;
        let store = setup(&cfg, 18);
        assert!(!store.contains("nast.layer0.tem.gate.b"));
        assert!(!store.contains("nast.layer0.tem.self.wq"));
        assert!(store.contains("nast.layer0.tem.cross.wcq"));
        // pipeline still runs
        let (x_ta, m_ta, m_co, x_c, u) = eps_fixture(&cfg, 19);
        let a_hat = ring_a_hat(3);
        let out = run_eps(&cfg, &store, &x_ta, &m_ta, &m_co, &x_c, &u, &a_hat, 1);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradients_reach_every_parameter_including_aux() {
        let mut cfg = ModelConfig::tiny(3, 4);
        cfg.aux_block = AuxPlacement::Nast;
        cfg.residual_layers = 1;
        let store = setup(&cfg, 20);
        let (x_ta, m_ta, m_co, x_c, u) = eps_fixture(&cfg, 21);
        let a_hat = ring_a_hat(3);
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let a = t.leaf2(a_hat);
        let xc = t.leaf(x_c);
        let uv = t.leaf(u);
        let input = DenoiserInput { x_ta_t: &x_ta, m_ta: &m_ta, m_co: &m_co, t: 2, t_max: 10 };
        let out = epsilon_theta(&mut t, &binding, &cfg, &input, xc, uv, a).unwrap();
        let sq = t.square(out);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        let last_res = format!("nast.layer{}.res", cfg.residual_layers - 1);
        for name in store.names() {
            if name.starts_with(&last_res) {
                // the final layer's residual output feeds nothing downstream
                continue;
            }
            let g = grads
                .get(binding.var(name))
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max > 0.0, "gradient for {name} is identically zero");
        }
    }

    #[test]
    fn epsilon_theta_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny(3, 4);
        let store = setup(&cfg, 22);
        let (x_ta, m_ta, m_co, x_c, u) = eps_fixture(&cfg, 23);
        let a_hat = ring_a_hat(3);
        let loss = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let binding = Binding::register(&mut t, store);
            let a = t.leaf2(a_hat.clone());
            let xc = t.leaf(x_c.clone());
            let uv = t.leaf(u.clone());
            let input = DenoiserInput { x_ta_t: &x_ta, m_ta: &m_ta, m_co: &m_co, t: 2, t_max: 10 };
            let out = epsilon_theta(&mut t, &binding, &cfg, &input, xc, uv, a).unwrap();
            let sq = t.square(out);
            let s = t.sum_all(sq);
            t.value(s).iter().next().copied().unwrap()
        };
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let a = t.leaf2(a_hat.clone());
        let xc = t.leaf(x_c.clone());
        let uv = t.leaf(u.clone());
        let input = DenoiserInput { x_ta_t: &x_ta, m_ta: &m_ta, m_co: &m_co, t: 2, t_max: 10 };
        let out = epsilon_theta(&mut t, &binding, &cfg, &input, xc, uv, a).unwrap();
        let sq = t.square(out);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        let h = 1e-6;
        for name in [
            "nast.in.w",
            "nast.step.w1",
            "nast.layer0.tem.gate.w1",
            "nast.layer0.tem.cross.wcv",
            "nast.layer1.gcn.w",
            "nast.layer1.split.w",
            "nast.out2.w",
        ] {
            let g = grads.get(binding.var(name)).unwrap().clone();
            let len = store.get(name).len();
            for idx in (0..len).step_by((len / 2).max(1)) {
                let mut sp = store.clone();
                sp.get_mut(name).as_slice_mut().unwrap()[idx] += h;
                let mut sm = store.clone();
                sm.get_mut(name).as_slice_mut().unwrap()[idx] -= h;
                let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
                let an = g.as_slice().unwrap()[idx];
                assert!(
                    (fd - an).abs() / fd.abs().max(1.0) < 1e-3,
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
