//! Model configuration and the parameter container tying the three networks
//! together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Init, ParamStore};

/// Placement of the auxiliary S4 + GCGRU block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxPlacement {
    Off,
    Nast,
    Stc,
}

impl AuxPlacement {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" | "none" => Some(AuxPlacement::Off),
            "nast" => Some(AuxPlacement::Nast),
            "stc" => Some(AuxPlacement::Stc),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AuxPlacement::Off => "off",
            AuxPlacement::Nast => "nast",
            AuxPlacement::Stc => "stc",
        }
    }
}

/// Architecture hyperparameters. Widths follow the 64x2048 projection sizing
/// by default; tests shrink everything.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub n_nodes: usize,
    pub window_len: usize,
    /// S4 state dimension d.
    pub s4_state_dim: usize,
    /// Hidden channel count C_h.
    pub channels: usize,
    /// MLP hidden width in STC and NAST blocks.
    pub mlp_width: usize,
    /// Residual layer count R.
    pub residual_layers: usize,
    /// Head count for temporal/spatial attentions.
    pub heads: usize,
    /// Feature-attention width in BiS4PI.
    pub feat_width: usize,
    pub feat_heads: usize,
    /// Diffusion-step embedding width.
    pub step_embed_dim: usize,
    /// Share forward/backward BiS4PI weights.
    pub share_bis4pi: bool,
    /// Use the literal post-replacement tensors in the reconstruction loss
    /// (whose first two terms then vanish by construction).
    pub literal_rec_loss: bool,
    /// Ablation: replace BiS4PI with temporal linear interpolation.
    pub no_bis4pi: bool,
    /// Ablation: replace gated attention with plain cross-attention.
    pub no_gated_attention: bool,
    pub aux_block: AuxPlacement,
    /// Sinusoidal positional encoding for temporal attention.
    pub temporal_pos_encoding: bool,
}

impl ModelConfig {
    pub fn defaults(n_nodes: usize, window_len: usize) -> Self {
        ModelConfig {
            n_nodes,
            window_len,
            s4_state_dim: 64,
            channels: 64,
            mlp_width: 2048,
            residual_layers: 4,
            heads: 8,
            feat_width: 64,
            feat_heads: 8,
            step_embed_dim: 128,
            share_bis4pi: false,
            literal_rec_loss: false,
            no_bis4pi: false,
            no_gated_attention: false,
            aux_block: AuxPlacement::Off,
            temporal_pos_encoding: true,
        }
    }

    /// Tiny double-precision configuration used by gradient checks.
    pub fn tiny(n_nodes: usize, window_len: usize) -> Self {
        ModelConfig {
            n_nodes,
            window_len,
            s4_state_dim: 4,
            channels: 8,
            mlp_width: 8,
            residual_layers: 2,
            heads: 2,
            feat_width: 8,
            feat_heads: 2,
            step_embed_dim: 8,
            share_bis4pi: false,
            literal_rec_loss: false,
            no_bis4pi: false,
            no_gated_attention: false,
            aux_block: AuxPlacement::Off,
            temporal_pos_encoding: true,
        }
    }
}

/// All trainable weights of BiS4PI, STC and the NAST residual stack.
#[derive(Clone, Debug)]
pub struct AdastiModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl AdastiModel {
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let mut store = ParamStore::new();
        if !cfg.no_bis4pi {
            crate::bis4pi::init_params(&mut store, &mut init, &cfg);
        }
        crate::stc::init_params(&mut store, &mut init, &cfg);
        crate::nast::init_params(&mut store, &mut init, &cfg);
        AdastiModel { cfg, params: store }
    }
}
