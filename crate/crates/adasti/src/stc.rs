//! Spatio-temporal conditionalizer: lifts the pre-imputed window to C_h
//! channels, runs parallel temporal-attention / GCN / spatial-attention
//! branches off a shared temporal trunk, and fuses them through an MLP into
//! the conditional tensor U.

use crate::error::Result;
use crate::model::{AuxPlacement, ModelConfig};
use crate::nn::{
    self, init_gcn, init_layer_norm, init_mlp, init_self_attention, layer_norm, mlp,
    self_attention, sinusoidal_table, Binding, Init, ParamStore,
};
use crate::tape::{Tape, Var};

/// Intermediate branch outputs, all (C,N,L).
pub struct StcTrace {
    pub u_in: Var,
    pub y_tem: Var,
    pub y_gcn: Var,
    pub y_spa: Var,
    pub u: Var,
}

pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) {
    let c = cfg.channels;
    store.insert("stc.lift.w", init.scaled(&[c, 1], 1));
    store.insert("stc.lift.b", init.zeros(&[c]));
    init_self_attention(store, init, "stc.attn_tem", c);
    init_layer_norm(store, init, "stc.ln_tem", c);
    init_gcn(store, init, "stc.gcn", c, c);
    init_layer_norm(store, init, "stc.ln_gcn", c);
    init_self_attention(store, init, "stc.attn_spa", c);
    init_layer_norm(store, init, "stc.ln_spa", c);
    init_mlp(store, init, "stc.mlp", c, cfg.mlp_width, c);
    init_layer_norm(store, init, "stc.ln_out", c);
    if cfg.aux_block == AuxPlacement::Stc {
        crate::aux_block::init_params(store, init, cfg, "stc.aux");
    }
}

/// (C,N,L) -> temporal tokens (N,L,C).
fn tem_tokens(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, vec![1, 2, 0])
}

fn from_tem_tokens(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, vec![2, 0, 1])
}

/// (C,N,L) -> spatial tokens (L,N,C); the same permutation inverts itself.
fn spa_tokens(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, vec![2, 1, 0])
}

/// Pointwise 1 -> C_h lift of the (N,L) window.
fn lift(tape: &mut Tape, binding: &Binding, x_c: Var, c: usize) -> Var {
    let shape = tape.value(x_c).shape().to_vec();
    let (n, l) = (shape[0], shape[1]);
    let flat = tape.reshape(x_c, vec![1, n * l]);
    let w = binding.var("stc.lift.w");
    let lifted = tape.matmul(w, flat);
    let cube = tape.reshape(lifted, vec![c, n, l]);
    let b = binding.var("stc.lift.b");
    let b3 = tape.reshape(b, vec![c, 1, 1]);
    tape.add(cube, b3)
}

/// Full conditionalizer. `x_c` is the pre-imputed (N,L) window, `a_hat` the
/// normalized adjacency leaf.
pub fn forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    x_c: Var,
    a_hat: Var,
) -> Result<StcTrace> {
    let c = cfg.channels;
    let u_in = lift(tape, binding, x_c, c);

    // temporal branch
    let tok = tem_tokens(tape, u_in);
    let attn_in = if cfg.temporal_pos_encoding {
        let pos = tape.leaf2(sinusoidal_table(cfg.window_len, c));
        tape.add(tok, pos)
    } else {
        tok
    };
    let attn = self_attention(tape, binding, "stc.attn_tem", attn_in, cfg.heads);
    let res = tape.add(attn, tok);
    let y_tem_tok = layer_norm(tape, binding, "stc.ln_tem", res);
    let y_tem = from_tem_tokens(tape, y_tem_tok);

    // graph branch
    let gcn_out = nn::gcn(tape, binding, "stc.gcn", y_tem, a_hat);
    let g_res = tape.add(gcn_out, u_in);
    let g_tok = tem_tokens(tape, g_res);
    let g_norm = layer_norm(tape, binding, "stc.ln_gcn", g_tok);
    let y_gcn = from_tem_tokens(tape, g_norm);

    // spatial branch
    let s_tok = spa_tokens(tape, y_tem);
    let s_attn = self_attention(tape, binding, "stc.attn_spa", s_tok, cfg.heads);
    let u_in_s = spa_tokens(tape, u_in);
    let s_res = tape.add(s_attn, u_in_s);
    let s_norm = layer_norm(tape, binding, "stc.ln_spa", s_res);
    let y_spa = spa_tokens(tape, s_norm);

    // fusion
    let s1 = tape.add(u_in, y_tem);
    let s2 = tape.add(s1, y_gcn);
    let y_sum = tape.add(s2, y_spa);
    let f_tok = tem_tokens(tape, y_sum);
    let f_mlp = mlp(tape, binding, "stc.mlp", f_tok);
    let f_res = tape.add(f_mlp, f_tok);
    let f_norm = layer_norm(tape, binding, "stc.ln_out", f_res);
    let mut u = from_tem_tokens(tape, f_norm);

    if cfg.aux_block == AuxPlacement::Stc {
        u = crate::aux_block::forward(tape, binding, cfg, "stc.aux", u, a_hat)?;
    }
    Ok(StcTrace { u_in, y_tem, y_gcn, y_spa, u })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
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

    fn run(cfg: &ModelConfig, store: &ParamStore, x: &ArrayD<f64>) -> ArrayD<f64> {
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, store);
        let a_hat = t.leaf2(ring_a_hat(cfg.n_nodes));
        let xv = t.leaf(x.clone());
        let trace = forward(&mut t, &binding, cfg, xv, a_hat).unwrap();
        t.value(trace.u).clone()
    }

    #[test]
    fn output_shape_and_finiteness() {
        let cfg = ModelConfig::tiny(4, 6);
        let store = setup(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init { rng: &mut rng };
        let x = init.normal(&[4, 6], 1.0);
        let u = run(&cfg, &store, &x);
        assert_eq!(u.shape(), &[cfg.channels, 4, 6]);
        assert!(u.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_spatial_attention_reduces_branch_to_normed_input() {
        let cfg = ModelConfig::tiny(3, 5);
        let mut store = setup(&cfg, 3);
        for suffix in ["wq", "wk", "wv", "wo"] {
            store.get_mut(&format!("stc.attn_spa.{suffix}")).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut init = Init { rng: &mut rng };
        let x = init.normal(&[3, 5], 1.0);
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let a_hat = t.leaf2(ring_a_hat(3));
        let xv = t.leaf(x);
        let trace = forward(&mut t, &binding, &cfg, xv, a_hat).unwrap();
        // Attn_spa collapses to zero, so Y_spa = Norm(U_in)
        let u_in = trace.u_in;
        let tok = spa_tokens(&mut t, u_in);
        let normed = layer_norm(&mut t, &binding, "stc.ln_spa", tok);
        let expect = spa_tokens(&mut t, normed);
        let got = t.value(trace.y_spa).clone();
        for (a, b) in got.iter().zip(t.value(expect).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn time_shift_equivariant_without_positional_encoding() {
        let mut cfg = ModelConfig::tiny(3, 6);
        cfg.temporal_pos_encoding = false;
        let store = setup(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut init = Init { rng: &mut rng };
        let x = init.normal(&[3, 6], 1.0);
        let base = run(&cfg, &store, &x);
        // cyclic shift of the time axis
        let shifted = ArrayD::from_shape_fn(IxDyn(&[3, 6]), |ix| x[[ix[0], (ix[1] + 1) % 6]]);
        let out = run(&cfg, &store, &shifted);
        for c in 0..cfg.channels {
            for n in 0..3 {
                for l in 0..6 {
                    let diff = (out[[c, n, l]] - base[[c, n, (l + 1) % 6]]).abs();
                    assert!(diff < 1e-9, "({c},{n},{l}) diff {diff}");
                }
            }
        }
    }

    #[test]
    fn positional_encoding_breaks_shift_equivariance() {
        let cfg = ModelConfig::tiny(3, 6);
        let store = setup(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut init = Init { rng: &mut rng };
        let x = init.normal(&[3, 6], 1.0);
        let base = run(&cfg, &store, &x);
        let shifted = ArrayD::from_shape_fn(IxDyn(&[3, 6]), |ix| x[[ix[0], (ix[1] + 1) % 6]]);
        let out = run(&cfg, &store, &shifted);
        let mut max_diff = 0.0f64;
        for c in 0..cfg.channels {
            for n in 0..3 {
                for l in 0..6 {
                    max_diff = max_diff.max((out[[c, n, l]] - base[[c, n, (l + 1) % 6]]).abs());
                }
            }
        }
        assert!(max_diff > 1e-6);
    }

    #[test]
    fn gradients_reach_every_parameter() {
        let mut cfg = ModelConfig::tiny(3, 5);
        cfg.aux_block = AuxPlacement::Stc;
        let store = setup(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut init = Init { rng: &mut rng };
        let x = init.normal(&[3, 5], 1.0);
        let mut t = Tape::new();
        let binding = Binding::register(&mut t, &store);
        let a_hat = t.leaf2(ring_a_hat(3));
        let xv = t.leaf(x);
        let trace = forward(&mut t, &binding, &cfg, xv, a_hat).unwrap();
        let sq = t.square(trace.u);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);
        for name in store.names() {
            let g = grads
                .get(binding.var(name))
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max > 0.0, "gradient for {name} is identically zero");
        }
    }
}
