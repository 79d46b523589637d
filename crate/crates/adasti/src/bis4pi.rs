//! Bidirectional S4 pre-imputation network: linear fill, first S4 layer,
//! feature attention, second S4 layer, with masked replacement between the
//! stages so observed entries pass through untouched. Two directional passes
//! (forward and time-reversed) are averaged on the missing entries.

use ndarray::Array2;

use crate::error::{AdastiError, Result};
use crate::model::ModelConfig;
use crate::nn::{
    init_layer_norm, init_mlp, init_s4_layer, init_self_attention, layer_norm, linear_last,
    masked_mae, mlp, self_attention, Binding, Init, ParamStore, S4Layer,
};
use crate::tape::{Tape, Var};

/// Intermediate tensors of one directional pass, all in original time order.
pub struct DirectionalTrace {
    pub y_c: Var,
    pub h: Var,
    pub h_c: Var,
    pub c: Var,
    pub c_c: Var,
    pub x_hat: Var,
    pub x_c_dir: Var,
}

pub struct PreImputation {
    pub x_c: Var,
    pub trace_f: DirectionalTrace,
    pub trace_b: DirectionalTrace,
}

/// Exact elementwise blend X*M + H*(1-M); observed entries are bit-identical
/// to X. Plain-array form used by the data-facing API.
pub fn masked_replace(x: &Array2<f64>, m: &Array2<u8>, h: &Array2<f64>) -> Result<Array2<f64>> {
    if x.dim() != m.dim() || x.dim() != h.dim() {
        return Err(AdastiError::contract("masked_replace shape mismatch"));
    }
    Ok(Array2::from_shape_fn(x.dim(), |ix| if m[ix] == 1 { x[ix] } else { h[ix] }))
}

/// Tape form of the blend; `m` and `one_minus_m` are constants on the tape.
pub fn masked_replace_var(tape: &mut Tape, x: Var, m: Var, one_minus_m: Var, h: Var) -> Var {
    let keep = tape.mul(x, m);
    let fill = tape.mul(h, one_minus_m);
    tape.add(keep, fill)
}

fn dir_prefix(cfg: &ModelConfig, backward: bool) -> &'static str {
    if cfg.share_bis4pi {
        "bis4pi.s"
    } else if backward {
        "bis4pi.b"
    } else {
        "bis4pi.f"
    }
}

pub fn init_params(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig) {
    let n = cfg.n_nodes;
    let w = cfg.feat_width;
    let dirs: &[&str] = if cfg.share_bis4pi { &["bis4pi.s"] } else { &["bis4pi.f", "bis4pi.b"] };
    for dir in dirs {
        store.insert(format!("{dir}.fill.w"), init.scaled(&[n, n], n));
        store.insert(format!("{dir}.fill.b"), init.zeros(&[n]));
        init_s4_layer(store, init, &format!("{dir}.s4a"), n, cfg.s4_state_dim);
        init_s4_layer(store, init, &format!("{dir}.s4b"), n, cfg.s4_state_dim);
        // feature-attention encoder layer: scalar embed, self-attention over
        // nodes, feed-forward, scalar read-out
        store.insert(format!("{dir}.fa.embed.w"), init.scaled(&[1, w], 1));
        store.insert(format!("{dir}.fa.embed.b"), init.zeros(&[w]));
        init_self_attention(store, init, &format!("{dir}.fa.attn"), w);
        init_layer_norm(store, init, &format!("{dir}.fa.ln1"), w);
        init_mlp(store, init, &format!("{dir}.fa.ff"), w, w, w);
        init_layer_norm(store, init, &format!("{dir}.fa.ln2"), w);
        store.insert(format!("{dir}.fa.out.w"), init.scaled(&[w, 1], w));
        store.insert(format!("{dir}.fa.out.b"), init.zeros(&[1]));
    }
}

/// One transformer-encoder layer over the node axis: every timestamp's node
/// vector attends across nodes. Input and output are (N,L).
pub fn feature_attention(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    prefix: &str,
    h_c: Var,
) -> Var {
    let shape = tape.value(h_c).shape().to_vec();
    let (n, l) = (shape[0], shape[1]);
    // (N,L) -> tokens: (L, N, 1)
    let t0 = tape.permute(h_c, vec![1, 0]);
    let tokens = tape.reshape(t0, vec![l, n, 1]);
    let embedded = linear_last(
        tape,
        tokens,
        binding.var(&format!("{prefix}.embed.w")),
        Some(binding.var(&format!("{prefix}.embed.b"))),
    );
    let attn = self_attention(tape, binding, &format!("{prefix}.attn"), embedded, cfg.feat_heads);
    let res1 = tape.add(embedded, attn);
    let norm1 = layer_norm(tape, binding, &format!("{prefix}.ln1"), res1);
    let ff = mlp(tape, binding, &format!("{prefix}.ff"), norm1);
    let res2 = tape.add(norm1, ff);
    let norm2 = layer_norm(tape, binding, &format!("{prefix}.ln2"), res2);
    let out = linear_last(
        tape,
        norm2,
        binding.var(&format!("{prefix}.out.w")),
        Some(binding.var(&format!("{prefix}.out.b"))),
    );
    let flat = tape.reshape(out, vec![l, n]);
    tape.permute(flat, vec![1, 0])
}

/// One directional pass: fill -> S4 -> replace -> feature attention ->
/// replace -> S4 -> replace. The backward direction reverses time around the
/// pipeline; every returned tensor is in original time order.
pub fn directional_forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    x: Var,
    m: Var,
    one_minus_m: Var,
    backward: bool,
) -> Result<DirectionalTrace> {
    let prefix = dir_prefix(cfg, backward);
    let (x_d, m_d, omm_d) = if backward {
        (tape.reverse_axis(x, 1), tape.reverse_axis(m, 1), tape.reverse_axis(one_minus_m, 1))
    } else {
        (x, m, one_minus_m)
    };

    let fill_w = binding.var(&format!("{prefix}.fill.w"));
    let fill_b = binding.var(&format!("{prefix}.fill.b"));
    let wx = tape.matmul(fill_w, x_d);
    let b_col = tape.reshape(fill_b, vec![cfg.n_nodes, 1]);
    let y_c = tape.add(wx, b_col);

    let s4a = S4Layer::build(tape, binding, &format!("{prefix}.s4a"), cfg.n_nodes, cfg.s4_state_dim, cfg.window_len)?;
    let h = s4a.apply2(tape, y_c);
    let h_c = masked_replace_var(tape, x_d, m_d, omm_d, h);

    let c = feature_attention(tape, binding, cfg, &format!("{prefix}.fa"), h_c);
    let c_c = masked_replace_var(tape, x_d, m_d, omm_d, c);

    let s4b = S4Layer::build(tape, binding, &format!("{prefix}.s4b"), cfg.n_nodes, cfg.s4_state_dim, cfg.window_len)?;
    let x_hat = s4b.apply2(tape, c_c);
    let x_c_dir = masked_replace_var(tape, x_d, m_d, omm_d, x_hat);

    let un = |tape: &mut Tape, v: Var| if backward { tape.reverse_axis(v, 1) } else { v };
    Ok(DirectionalTrace {
        y_c: un(tape, y_c),
        h: un(tape, h),
        h_c: un(tape, h_c),
        c: un(tape, c),
        c_c: un(tape, c_c),
        x_hat: un(tape, x_hat),
        x_c_dir: un(tape, x_c_dir),
    })
}

/// Full bidirectional pre-imputation: mean of the two directional outputs on
/// missing entries, observed entries copied from X.
pub fn forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &ModelConfig,
    x: Var,
    m: Var,
    one_minus_m: Var,
) -> Result<PreImputation> {
    let trace_f = directional_forward(tape, binding, cfg, x, m, one_minus_m, false)?;
    let trace_b = directional_forward(tape, binding, cfg, x, m, one_minus_m, true)?;
    let sum = tape.add(trace_f.x_c_dir, trace_b.x_c_dir);
    let mean = tape.scale(sum, 0.5);
    let x_c = masked_replace_var(tape, x, m, one_minus_m, mean);
    Ok(PreImputation { x_c, trace_f, trace_b })
}

/// Reconstruction loss over observed entries at the three stages. By default
/// the pre-replacement tensors H and C are compared (the replaced ones match
/// X on observed entries identically); `literal_rec_loss` restores the
/// vanishing textbook form.
pub fn reconstruction_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    x: Var,
    m: Var,
    observed_count: usize,
    trace: &DirectionalTrace,
) -> Result<Var> {
    if observed_count == 0 {
        return Err(AdastiError::contract("reconstruction loss undefined: mask has no observed entries"));
    }
    let (stage1, stage2) = if cfg.literal_rec_loss {
        (trace.h_c, trace.c_c)
    } else {
        (trace.h, trace.c)
    };
    let l1 = masked_mae(tape, x, stage1, m, observed_count);
    let l2 = masked_mae(tape, x, stage2, m, observed_count);
    let l3 = masked_mae(tape, x, trace.x_hat, m, observed_count);
    let s = tape.add(l1, l2);
    Ok(tape.add(s, l3))
}

/// MAE between the two directional outputs restricted to missing entries;
/// zero when nothing is missing.
pub fn consistency_loss(
    tape: &mut Tape,
    pre: &PreImputation,
    one_minus_m: Var,
    missing_count: usize,
) -> Var {
    if missing_count == 0 {
        return tape.scalar(0.0);
    }
    masked_mae(tape, pre.trace_f.x_c_dir, pre.trace_b.x_c_dir, one_minus_m, missing_count)
}
