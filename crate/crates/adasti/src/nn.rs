//! Trainable-parameter storage and the network layers shared by BiS4PI, STC
//! and NAST, all expressed as tape operations so gradients reach every weight.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tape::{Tape, Var};

/// Ordered name -> array map holding every trainable weight.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

/// Parameter initializers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> ArrayD<f64> {
        let dist = Normal::new(0.0, std).unwrap();
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(self.rng))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones(&mut self, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(shape), 1.0)
    }

    /// Fan-in scaled normal, the default for weight matrices.
    pub fn scaled(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
        self.normal(shape, 1.0 / (fan_in as f64).sqrt())
    }

    /// Log-steps spaced geometrically in [lo, hi].
    pub fn log_steps(&mut self, count: usize, lo: f64, hi: f64) -> ArrayD<f64> {
        let (llo, lhi) = (lo.ln(), hi.ln());
        ArrayD::from_shape_fn(IxDyn(&[count]), |_| self.rng.gen_range(llo..lhi))
    }
}

/// Tape handles for every parameter of a store, registered as leaves.
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn register(tape: &mut Tape, store: &ParamStore) -> Self {
        let mut vars = IndexMap::new();
        for (name, value) in store.iter() {
            vars.insert(name.clone(), tape.leaf(value.clone()));
        }
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not registered on tape"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

// ---- functional layers ----

/// x (.., Cin) @ w (Cin, Cout) + b, applied over the last axis.
pub fn linear_last(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Var {
    let xshape = tape.value(x).shape().to_vec();
    let cin = *xshape.last().unwrap();
    let cout = tape.value(w).shape()[1];
    let rows: usize = xshape[..xshape.len() - 1].iter().product();
    let flat = tape.reshape(x, vec![rows, cin]);
    let mm = tape.matmul(flat, w);
    let mut out_shape = xshape;
    *out_shape.last_mut().unwrap() = cout;
    let out = tape.reshape(mm, out_shape);
    match b {
        Some(b) => tape.add(out, b),
        None => out,
    }
}

/// Scaled dot-product attention with `heads` heads over (B,S,C) tensors.
/// q/k/v are already projected; no output projection here.
pub fn attention_core(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let shape = tape.value(q).shape().to_vec();
    let (b, s, c) = (shape[0], shape[1], shape[2]);
    assert!(c % heads == 0, "channel width {c} not divisible by {heads} heads");
    let hd = c / heads;
    let split = |tape: &mut Tape, x: Var| {
        let r = tape.reshape(x, vec![b, s, heads, hd]);
        let p = tape.permute(r, vec![0, 2, 1, 3]);
        tape.reshape(p, vec![b * heads, s, hd])
    };
    let qh = split(tape, q);
    let kh = split(tape, k);
    let vh = split(tape, v);
    let kt = tape.permute(kh, vec![0, 2, 1]);
    let scores = tape.bmatmul(qh, kt);
    let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
    let probs = tape.softmax_last(scaled);
    let ctx = tape.bmatmul(probs, vh);
    let r = tape.reshape(ctx, vec![b, heads, s, hd]);
    let p = tape.permute(r, vec![0, 2, 1, 3]);
    tape.reshape(p, vec![b, s, c])
}

/// Standard multi-head self-attention with output projection.
/// Parameters: `{prefix}.wq/wk/wv/wo` (C x C) and `{prefix}.bo` (C).
pub fn self_attention(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Var {
    let q = linear_last(tape, x, binding.var(&format!("{prefix}.wq")), None);
    let k = linear_last(tape, x, binding.var(&format!("{prefix}.wk")), None);
    let v = linear_last(tape, x, binding.var(&format!("{prefix}.wv")), None);
    let ctx = attention_core(tape, q, k, v, heads);
    linear_last(
        tape,
        ctx,
        binding.var(&format!("{prefix}.wo")),
        Some(binding.var(&format!("{prefix}.bo"))),
    )
}

pub fn init_self_attention(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.wq"), init.scaled(&[c, c], c));
    store.insert(format!("{prefix}.wk"), init.scaled(&[c, c], c));
    store.insert(format!("{prefix}.wv"), init.scaled(&[c, c], c));
    store.insert(format!("{prefix}.wo"), init.scaled(&[c, c], c));
    store.insert(format!("{prefix}.bo"), init.zeros(&[c]));
}

/// Cross-attention: queries and keys from the conditional tensor, values from
/// the input. Parameters: `{prefix}.wcq/wck/wcv` (C x C). No output projection.
pub fn cross_attention(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
    cond: Var,
    heads: usize,
) -> Var {
    let q = linear_last(tape, cond, binding.var(&format!("{prefix}.wcq")), None);
    let k = linear_last(tape, cond, binding.var(&format!("{prefix}.wck")), None);
    let v = linear_last(tape, x, binding.var(&format!("{prefix}.wcv")), None);
    attention_core(tape, q, k, v, heads)
}

pub fn init_cross_attention(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.wcq"), init.scaled(&[c, c], c));
    store.insert(format!("{prefix}.wck"), init.scaled(&[c, c], c));
    store.insert(format!("{prefix}.wcv"), init.scaled(&[c, c], c));
}

/// Layer normalization over the last axis with parameters
/// `{prefix}.gain` / `{prefix}.bias`.
pub fn layer_norm(tape: &mut Tape, binding: &Binding, prefix: &str, x: Var) -> Var {
    tape.layer_norm_last(
        x,
        binding.var(&format!("{prefix}.gain")),
        binding.var(&format!("{prefix}.bias")),
        1e-5,
    )
}

pub fn init_layer_norm(store: &mut ParamStore, init: &mut Init, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gain"), init.ones(&[c]));
    store.insert(format!("{prefix}.bias"), init.zeros(&[c]));
}

/// Two-layer MLP with ReLU: `{prefix}.w1/b1/w2/b2`.
pub fn mlp(tape: &mut Tape, binding: &Binding, prefix: &str, x: Var) -> Var {
    let h = linear_last(
        tape,
        x,
        binding.var(&format!("{prefix}.w1")),
        Some(binding.var(&format!("{prefix}.b1"))),
    );
    let h = tape.relu(h);
    linear_last(
        tape,
        h,
        binding.var(&format!("{prefix}.w2")),
        Some(binding.var(&format!("{prefix}.b2"))),
    )
}

pub fn init_mlp(store: &mut ParamStore, init: &mut Init, prefix: &str, cin: usize, hidden: usize, cout: usize) {
    store.insert(format!("{prefix}.w1"), init.scaled(&[cin, hidden], cin));
    store.insert(format!("{prefix}.b1"), init.zeros(&[hidden]));
    store.insert(format!("{prefix}.w2"), init.scaled(&[hidden, cout], hidden));
    store.insert(format!("{prefix}.b2"), init.zeros(&[cout]));
}

/// Sinusoidal positional table (len x dim), used as a constant.
pub fn sinusoidal_table(len: usize, dim: usize) -> Array2<f64> {
    let mut t = Array2::<f64>::zeros((len, dim));
    for pos in 0..len {
        for i in 0..dim {
            let denom = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / denom;
            t[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// Graph convolution on a (C,N,L) tensor: channel map after symmetric
/// neighborhood averaging, H'_{c',n,l} = sum_c W_{c',c} sum_m Ahat_{n,m} H_{c,m,l}.
/// Parameters: `{prefix}.w` (Cout x Cin), `{prefix}.b` (Cout).
pub fn gcn(tape: &mut Tape, binding: &Binding, prefix: &str, h: Var, a_hat: Var) -> Var {
    let shape = tape.value(h).shape().to_vec();
    let (c, n, l) = (shape[0], shape[1], shape[2]);
    // neighborhood mixing: (N,N) @ (N, C*L)
    let perm = tape.permute(h, vec![1, 0, 2]);
    let flat = tape.reshape(perm, vec![n, c * l]);
    let mixed = tape.matmul(a_hat, flat);
    let unflat = tape.reshape(mixed, vec![n, c, l]);
    let back = tape.permute(unflat, vec![1, 0, 2]);
    // channel mixing: (Cout,Cin) @ (Cin, N*L)
    let w = binding.var(&format!("{prefix}.w"));
    let cout = tape.value(w).shape()[0];
    let flat_c = tape.reshape(back, vec![c, n * l]);
    let mapped = tape.matmul(w, flat_c);
    let out = tape.reshape(mapped, vec![cout, n, l]);
    let b = binding.var(&format!("{prefix}.b"));
    let b3 = tape.reshape(b, vec![cout, 1, 1]);
    tape.add(out, b3)
}

pub fn init_gcn(store: &mut ParamStore, init: &mut Init, prefix: &str, cin: usize, cout: usize) {
    store.insert(format!("{prefix}.w"), init.scaled(&[cout, cin], cin));
    store.insert(format!("{prefix}.b"), init.zeros(&[cout]));
}

/// Per-channel S4 layer. Parameters (stacked over channels):
/// `{prefix}.a` (CH,d,d), `{prefix}.b` (CH,d,1), `{prefix}.c` (CH,1,d),
/// `{prefix}.log_step` (CH).
///
/// The kernel and its causal-convolution Toeplitz matrix depend only on the
/// parameters, so they are built once per tape and reused for every sequence.
pub struct S4Layer {
    toeplitz: Vec<Var>,
}

impl S4Layer {
    pub fn build(
        tape: &mut Tape,
        binding: &Binding,
        prefix: &str,
        channels: usize,
        state_dim: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let a_all = binding.var(&format!("{prefix}.a"));
        let b_all = binding.var(&format!("{prefix}.b"));
        let c_all = binding.var(&format!("{prefix}.c"));
        let log_step = binding.var(&format!("{prefix}.log_step"));
        let eye = tape.leaf2(Array2::<f64>::eye(state_dim));
        let mut toeplitz = Vec::with_capacity(channels);
        for ch in 0..channels {
            let a = tape.slice(a_all, 0, ch, 1);
            let a = tape.reshape(a, vec![state_dim, state_dim]);
            let b = tape.slice(b_all, 0, ch, 1);
            let b = tape.reshape(b, vec![state_dim, 1]);
            let c = tape.slice(c_all, 0, ch, 1);
            let c = tape.reshape(c, vec![1, state_dim]);
            let ls = tape.slice(log_step, 0, ch, 1);
            let step = tape.exp(ls);
            let step11 = tape.reshape(step, vec![1, 1]);
            // bilinear discretization on-tape
            let half = tape.scale(step11, 0.5);
            let half_a = tape.mul(half, a);
            let minus = tape.sub(eye, half_a);
            let plus = tape.add(eye, half_a);
            let inv = tape.inverse(minus)?;
            let a_bar = tape.matmul(inv, plus);
            let db = tape.mul(step11, b);
            let b_bar = tape.matmul(inv, db);
            // kernel taps by iterated state propagation
            let mut taps = Vec::with_capacity(seq_len);
            let mut v = b_bar;
            for i in 0..seq_len {
                let y = tape.matmul(c, v);
                taps.push(tape.reshape(y, vec![1]));
                if i + 1 < seq_len {
                    v = tape.matmul(a_bar, v);
                }
            }
            let kernel = tape.concat(&taps, 0);
            toeplitz.push(tape.causal_toeplitz(kernel));
        }
        Ok(S4Layer { toeplitz })
    }

    /// Apply to a (CH, L) tensor: causal convolution along the last axis,
    /// one independent SSM per channel.
    pub fn apply2(&self, tape: &mut Tape, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (ch, l) = (shape[0], shape[1]);
        assert_eq!(ch, self.toeplitz.len());
        let mut rows = Vec::with_capacity(ch);
        for c in 0..ch {
            let row = tape.slice(x, 0, c, 1);
            let col = tape.reshape(row, vec![l, 1]);
            let y = tape.matmul(self.toeplitz[c], col);
            rows.push(tape.reshape(y, vec![1, l]));
        }
        tape.concat(&rows, 0)
    }

    /// Apply to a (CH, N, L) tensor: convolution along time for every node,
    /// kernel shared across nodes within each channel.
    pub fn apply3(&self, tape: &mut Tape, x: Var) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let (ch, n, l) = (shape[0], shape[1], shape[2]);
        assert_eq!(ch, self.toeplitz.len());
        let mut planes = Vec::with_capacity(ch);
        for c in 0..ch {
            let plane = tape.slice(x, 0, c, 1);
            let mat = tape.reshape(plane, vec![n, l]);
            let matt = tape.permute(mat, vec![1, 0]);
            let y = tape.matmul(self.toeplitz[c], matt);
            let yt = tape.permute(y, vec![1, 0]);
            planes.push(tape.reshape(yt, vec![1, n, l]));
        }
        tape.concat(&planes, 0)
    }
}

pub fn init_s4_layer(
    store: &mut ParamStore,
    init: &mut Init,
    prefix: &str,
    channels: usize,
    state_dim: usize,
) {
    let hippo = crate::s4::hippo_init(state_dim).expect("state dim >= 1");
    let mut a = ArrayD::zeros(IxDyn(&[channels, state_dim, state_dim]));
    for ch in 0..channels {
        for i in 0..state_dim {
            for j in 0..state_dim {
                a[[ch, i, j]] = hippo[[i, j]];
            }
        }
    }
    store.insert(format!("{prefix}.a"), a);
    let scale = 1.0 / (state_dim as f64).sqrt();
    store.insert(
        format!("{prefix}.b"),
        ArrayD::from_elem(IxDyn(&[channels, state_dim, 1]), scale),
    );
    store.insert(
        format!("{prefix}.c"),
        init.normal(&[channels, 1, state_dim], scale),
    );
    store.insert(format!("{prefix}.log_step"), init.log_steps(channels, 0.001, 0.1));
}

// ---- masked losses ----

/// Mean absolute error over entries where `mask` (a constant on the tape) is 1.
pub fn masked_mae(tape: &mut Tape, a: Var, b: Var, mask: Var, count: usize) -> Var {
    let diff = tape.sub(a, b);
    let ad = tape.abs(diff);
    let masked = tape.mul(ad, mask);
    let s = tape.sum_all(masked);
    tape.scale(s, 1.0 / count as f64)
}

/// Mean squared error over entries where `mask` is 1.
pub fn masked_mse(tape: &mut Tape, a: Var, b: Var, mask: Var, count: usize) -> Var {
    let diff = tape.sub(a, b);
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask);
    let s = tape.sum_all(masked);
    tape.scale(s, 1.0 / count as f64)
}

pub fn mask_to_f64(mask: &ndarray::Array2<u8>) -> Array2<f64> {
    mask.mapv(|v| v as f64)
}

pub fn ones_count(mask: &ndarray::Array2<u8>) -> usize {
    mask.iter().filter(|&&v| v == 1).count()
}
