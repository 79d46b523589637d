//! Flat key-value experiment configuration. Unknown keys are errors so typos
//! fail loudly; the canonical rendering doubles as the checkpoint fingerprint
//! source.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::ScheduleKind;
use crate::error::{AdastiError, Result};
use crate::model::{AuxPlacement, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MissingPattern {
    Random,
    Block,
    Native,
}

impl MissingPattern {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(MissingPattern::Random),
            "block" => Some(MissingPattern::Block),
            "native" => Some(MissingPattern::Native),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MissingPattern::Random => "random",
            MissingPattern::Block => "block",
            MissingPattern::Native => "native",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub graph: String,
    pub missing_token: String,
    pub window_len: usize,
    pub stride: usize,
    pub train_fraction: f64,
    pub synthetic_windows: usize,
    pub missing_pattern: MissingPattern,
    pub missing_rate: f64,
    pub n_v: usize,
    pub n_t: usize,
    pub channels: usize,
    pub mlp_width: usize,
    pub s4_state_dim: usize,
    pub residual_layers: usize,
    pub heads: usize,
    pub feat_width: usize,
    pub feat_heads: usize,
    pub step_embed_dim: usize,
    pub schedule_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub schedule_kind: ScheduleKind,
    pub lambda: f64,
    pub target_fraction: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub no_bis4pi: bool,
    pub no_gated_attention: bool,
    pub literal_reverse_coeffs: bool,
    pub literal_rec_loss: bool,
    pub share_bis4pi: bool,
    pub temporal_pos_encoding: bool,
    pub aux_s4_gcgru_placement: AuxPlacement,
    pub checkpoint: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "synthetic".into(),
            graph: "ring".into(),
            missing_token: "NA".into(),
            window_len: 24,
            stride: 24,
            train_fraction: 0.8,
            synthetic_windows: 400,
            missing_pattern: MissingPattern::Random,
            missing_rate: 0.25,
            n_v: 2,
            n_t: 6,
            channels: 64,
            mlp_width: 2048,
            s4_state_dim: 64,
            residual_layers: 4,
            heads: 8,
            feat_width: 64,
            feat_heads: 8,
            step_embed_dim: 128,
            schedule_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.2,
            schedule_kind: ScheduleKind::Quadratic,
            lambda: 1.0,
            target_fraction: 0.3,
            k: 100,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 16,
            seed: 42,
            no_bis4pi: false,
            no_gated_attention: false,
            literal_reverse_coeffs: false,
            literal_rec_loss: false,
            share_bis4pi: false,
            temporal_pos_encoding: true,
            aux_s4_gcgru_placement: AuxPlacement::Off,
            checkpoint: "adasti.ckpt".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| AdastiError::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(AdastiError::Config(format!(
            "invalid boolean '{value}' for key '{key}'"
        ))),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AdastiError::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(AdastiError::Config(format!("duplicate key '{key}'")));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.into(),
            "graph" => self.graph = value.into(),
            "missing_token" => self.missing_token = value.into(),
            "window_len" => self.window_len = parse_num(key, value)?,
            "stride" => self.stride = parse_num(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            "synthetic_windows" => self.synthetic_windows = parse_num(key, value)?,
            "missing_pattern" => {
                self.missing_pattern = MissingPattern::parse(value).ok_or_else(|| {
                    AdastiError::Config(format!("unknown missing_pattern '{value}'"))
                })?
            }
            "missing_rate" => self.missing_rate = parse_num(key, value)?,
            "n_v" => self.n_v = parse_num(key, value)?,
            "n_t" => self.n_t = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "mlp_width" => self.mlp_width = parse_num(key, value)?,
            "s4_state_dim" => self.s4_state_dim = parse_num(key, value)?,
            "residual_layers" => self.residual_layers = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "feat_width" => self.feat_width = parse_num(key, value)?,
            "feat_heads" => self.feat_heads = parse_num(key, value)?,
            "step_embed_dim" => self.step_embed_dim = parse_num(key, value)?,
            "schedule_steps" => self.schedule_steps = parse_num(key, value)?,
            "beta_min" => self.beta_min = parse_num(key, value)?,
            "beta_max" => self.beta_max = parse_num(key, value)?,
            "schedule_kind" => {
                self.schedule_kind = ScheduleKind::parse(value).ok_or_else(|| {
                    AdastiError::Config(format!("unknown schedule_kind '{value}'"))
                })?
            }
            "lambda" => self.lambda = parse_num(key, value)?,
            "target_fraction" => self.target_fraction = parse_num(key, value)?,
            "k" => self.k = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "no_bis4pi" => self.no_bis4pi = parse_bool(key, value)?,
            "no_gated_attention" => self.no_gated_attention = parse_bool(key, value)?,
            "literal_reverse_coeffs" => self.literal_reverse_coeffs = parse_bool(key, value)?,
            "literal_rec_loss" => self.literal_rec_loss = parse_bool(key, value)?,
            "share_bis4pi" => self.share_bis4pi = parse_bool(key, value)?,
            "temporal_pos_encoding" => self.temporal_pos_encoding = parse_bool(key, value)?,
            "aux_s4_gcgru_placement" => {
                self.aux_s4_gcgru_placement = AuxPlacement::parse(value).ok_or_else(|| {
                    AdastiError::Config(format!("unknown aux_s4_gcgru_placement '{value}'"))
                })?
            }
            "checkpoint" => self.checkpoint = value.into(),
            _ => return Err(AdastiError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(AdastiError::Config(msg));
        if self.window_len < 2 {
            return err("window_len must be at least 2".into());
        }
        if self.stride == 0 {
            return err("stride must be positive".into());
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return err("train_fraction must lie in (0,1)".into());
        }
        if !(0.0 < self.missing_rate && self.missing_rate < 1.0) {
            return err("missing_rate must lie in (0,1)".into());
        }
        if !(0.0 < self.target_fraction && self.target_fraction < 1.0) {
            return err("target_fraction must lie in (0,1)".into());
        }
        if self.lambda < 0.0 {
            return err("lambda must be nonnegative".into());
        }
        if !(0.0 < self.beta_min && self.beta_min < self.beta_max && self.beta_max < 1.0) {
            return err("beta bounds must satisfy 0 < beta_min < beta_max < 1".into());
        }
        for (name, v) in [
            ("channels", self.channels),
            ("mlp_width", self.mlp_width),
            ("s4_state_dim", self.s4_state_dim),
            ("residual_layers", self.residual_layers),
            ("heads", self.heads),
            ("feat_width", self.feat_width),
            ("feat_heads", self.feat_heads),
            ("step_embed_dim", self.step_embed_dim),
            ("schedule_steps", self.schedule_steps),
            ("k", self.k),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("n_v", self.n_v),
            ("n_t", self.n_t),
            ("synthetic_windows", self.synthetic_windows),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.channels % self.heads != 0 {
            return err("channels must be divisible by heads".into());
        }
        if self.feat_width % self.feat_heads != 0 {
            return err("feat_width must be divisible by feat_heads".into());
        }
        if self.learning_rate <= 0.0 {
            return err("learning_rate must be positive".into());
        }
        if self.dataset != "synthetic" && !Path::new(&self.dataset).exists() {
            return err(format!("dataset file '{}' does not exist", self.dataset));
        }
        if self.graph != "ring" && !Path::new(&self.graph).exists() {
            return err(format!("graph file '{}' does not exist", self.graph));
        }
        if self.dataset == "synthetic" && self.missing_pattern == MissingPattern::Native {
            return err("the synthetic dataset has no native missing pattern".into());
        }
        Ok(())
    }

    /// Deterministic rendering with every key present; `parse` round-trips it.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "graph = {}", self.graph);
        let _ = writeln!(s, "missing_token = {}", self.missing_token);
        let _ = writeln!(s, "window_len = {}", self.window_len);
        let _ = writeln!(s, "stride = {}", self.stride);
        let _ = writeln!(s, "train_fraction = {:?}", self.train_fraction);
        let _ = writeln!(s, "synthetic_windows = {}", self.synthetic_windows);
        let _ = writeln!(s, "missing_pattern = {}", self.missing_pattern.as_str());
        let _ = writeln!(s, "missing_rate = {:?}", self.missing_rate);
        let _ = writeln!(s, "n_v = {}", self.n_v);
        let _ = writeln!(s, "n_t = {}", self.n_t);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "mlp_width = {}", self.mlp_width);
        let _ = writeln!(s, "s4_state_dim = {}", self.s4_state_dim);
        let _ = writeln!(s, "residual_layers = {}", self.residual_layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "feat_width = {}", self.feat_width);
        let _ = writeln!(s, "feat_heads = {}", self.feat_heads);
        let _ = writeln!(s, "step_embed_dim = {}", self.step_embed_dim);
        let _ = writeln!(s, "schedule_steps = {}", self.schedule_steps);
        let _ = writeln!(s, "beta_min = {:?}", self.beta_min);
        let _ = writeln!(s, "beta_max = {:?}", self.beta_max);
        let _ = writeln!(s, "schedule_kind = {}", self.schedule_kind.as_str());
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "target_fraction = {:?}", self.target_fraction);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "no_bis4pi = {}", self.no_bis4pi);
        let _ = writeln!(s, "no_gated_attention = {}", self.no_gated_attention);
        let _ = writeln!(s, "literal_reverse_coeffs = {}", self.literal_reverse_coeffs);
        let _ = writeln!(s, "literal_rec_loss = {}", self.literal_rec_loss);
        let _ = writeln!(s, "share_bis4pi = {}", self.share_bis4pi);
        let _ = writeln!(s, "temporal_pos_encoding = {}", self.temporal_pos_encoding);
        let _ = writeln!(s, "aux_s4_gcgru_placement = {}", self.aux_s4_gcgru_placement.as_str());
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint);
        s
    }

    /// FNV-1a hash of the canonical rendering, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in self.canonical().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    pub fn model_config(&self, n_nodes: usize) -> ModelConfig {
        ModelConfig {
            n_nodes,
            window_len: self.window_len,
            s4_state_dim: self.s4_state_dim,
            channels: self.channels,
            mlp_width: self.mlp_width,
            residual_layers: self.residual_layers,
            heads: self.heads,
            feat_width: self.feat_width,
            feat_heads: self.feat_heads,
            step_embed_dim: self.step_embed_dim,
            share_bis4pi: self.share_bis4pi,
            literal_rec_loss: self.literal_rec_loss,
            no_bis4pi: self.no_bis4pi,
            no_gated_attention: self.no_gated_attention,
            aux_block: self.aux_s4_gcgru_placement,
            temporal_pos_encoding: self.temporal_pos_encoding,
        }
    }

    pub fn schedule(&self) -> Result<crate::diffusion::NoiseSchedule> {
        crate::diffusion::make_schedule(
            self.schedule_steps,
            self.beta_min,
            self.beta_max,
            self.schedule_kind,
        )
    }
}
