//! Optional auxiliary block: a per-channel S4 layer over time followed by a
//! graph-convolutional GRU, residual-added to its input. Config selects
//! whether it sits inside STC or inside the NAST residual layers.

use crate::error::Result;
use crate::model::ModelConfig;
use crate::nn::{init_s4_layer, Binding, Init, ParamStore, S4Layer};
use crate::tape::{Tape, Var};

pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, prefix: &str) {
    let c = cfg.channels;
    init_s4_layer(store, init, &format!("{prefix}.s4"), c, cfg.s4_state_dim);
    for gate in ["z", "r", "h"] {
        store.insert(format!("{prefix}.gru.{gate}.w"), init.scaled(&[c, 2 * c], 2 * c));
        store.insert(format!("{prefix}.gru.{gate}.b"), init.zeros(&[c]));
    }
}

/// One graph-convolution gate: channel map of the neighborhood-mixed
/// concatenation [state; input], both (C,N).
fn graph_gate(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    state: Var,
    input: Var,
    a_hat: Var,
    n: usize,
) -> Var {
    let cat = tape.concat(&[state, input], 0); // (2C, N)
    let c2 = tape.value(cat).shape()[0];
    let mixed_t = tape.permute(cat, vec![1, 0]); // (N, 2C)
    let mixed = tape.matmul(a_hat, mixed_t); // (N, 2C)
    let back = tape.permute(mixed, vec![1, 0]); // (2C, N)
    let w = binding.var(&format!("{prefix}.w"));
    let mapped = tape.matmul(w, back); // (C, N)
    let b = binding.var(&format!("{prefix}.b"));
    let b2 = tape.reshape(b, vec![tape.value(w).shape()[0], 1]);
    debug_assert_eq!(tape.value(mapped).shape(), &[c2 / 2, n]);
    tape.add(mapped, b2)
}

/// GCGRU over the time axis of a (C,N,L) tensor.
fn gcgru(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
    a_hat: Var,
) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let (c, n, l) = (shape[0], shape[1], shape[2]);
    let mut state = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[c, n])));
    let mut outputs = Vec::with_capacity(l);
    for step in 0..l {
        let slice = tape.slice(x, 2, step, 1);
        let input = tape.reshape(slice, vec![c, n]);
        let z_pre = graph_gate(tape, binding, &format!("{prefix}.gru.z"), state, input, a_hat, n);
        let z = tape.sigmoid(z_pre);
        let r_pre = graph_gate(tape, binding, &format!("{prefix}.gru.r"), state, input, a_hat, n);
        let r = tape.sigmoid(r_pre);
        let gated_state = tape.mul(r, state);
        let h_pre = graph_gate(tape, binding, &format!("{prefix}.gru.h"), gated_state, input, a_hat, n);
        let cand = tape.tanh(h_pre);
        // h <- (1-z) * h + z * cand
        let keep = tape.mul(z, state);
        let zc = tape.mul(z, cand);
        let diff = tape.sub(zc, keep);
        state = tape.add(state, diff);
        outputs.push(tape.reshape(state, vec![c, n, 1]));
    }
    tape.concat(&outputs, 2)
}

/// Residual aux block: x + GCGRU(S4(x)).
pub fn forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    a_hat: Var,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let s4 = S4Layer::build(tape, binding, &format!("{prefix}.s4"), cfg.channels, cfg.s4_state_dim, shape[2])?;
    let temporal = s4.apply3(tape, x);
    let recurrent = gcgru(tape, binding, prefix, temporal, a_hat);
    Ok(tape.add(x, recurrent))
}
