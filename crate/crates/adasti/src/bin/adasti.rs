//! Command-line entry points: training, imputation, evaluation, mask
//! generation, and ablations.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use adasti::checkpoint::Checkpoint;
use adasti::config::ExperimentConfig;
use adasti::data::{
    generate_block_mask, generate_random_mask, load_matrix_csv, load_series_csv,
    window_and_normalize, write_matrix_csv, MaskedSample,
};
use adasti::diffusion::impute;
use adasti::error::{AdastiError, Result};
use adasti::synth::ring_graph;
use adasti::train::{evaluate_checkpoint, run_ablation, train};

#[derive(Parser)]
#[command(name = "adasti", about = "Conditional-diffusion spatio-temporal imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternArg {
    Random,
    Block,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    NoBis4pi,
    NoGatedAttention,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best-validation checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Impute missing entries of a series using a trained checkpoint.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Series CSV: header of node ids, one row per timestamp.
        #[arg(long)]
        data: PathBuf,
        /// Headerless 0/1 mask CSV, same shape as the series (1 = observed).
        #[arg(long)]
        mask: PathBuf,
        /// Output CSV of the completed series.
        #[arg(long)]
        out: PathBuf,
        /// Number of reverse-process samples per window (median taken).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Score a checkpoint on its held-out test windows.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the key-value metrics report.
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate a synthetic missing-pattern mask CSV.
    MakeMasks {
        #[arg(long, value_enum)]
        pattern: PatternArg,
        #[arg(long)]
        rate: f64,
        /// Block pattern: nodes per block (seed node plus strongest neighbors).
        #[arg(long, default_value_t = 2)]
        nv: usize,
        /// Block pattern: consecutive timestamps per block.
        #[arg(long, default_value_t = 6)]
        nt: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Mask dimensions: node count and timestamp count.
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 24)]
        len: usize,
    },
    /// Train and evaluate an ablated model variant.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = train(&cfg)?;
            let path = PathBuf::from(&cfg.checkpoint);
            outcome.checkpoint.save(&path)?;
            println!("trained {} epochs", outcome.epoch_losses.len());
            if let Some((epoch, mae)) = outcome.val_history.last() {
                println!("last validation mae = {mae:?} (epoch {epoch})");
            }
            println!(
                "best validation mae = {:?} (epoch {})",
                outcome.checkpoint.best_val_mae, outcome.checkpoint.epoch
            );
            println!("checkpoint written to {}", path.display());
            Ok(())
        }
        Command::Impute { checkpoint, data, mask, out, k } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let k = k.unwrap_or(ck.config.k);
            let completed = impute_series(&ck, &data, &mask, k)?;
            write_matrix_csv(&out, &completed)?;
            println!("imputed series written to {}", out.display());
            Ok(())
        }
        Command::Evaluate { checkpoint, report } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let metrics = evaluate_checkpoint(&ck, None)?;
            metrics.write_to(&report)?;
            println!("mae = {:?}", metrics.mae);
            println!("rmse = {:?}", metrics.rmse);
            println!("report written to {}", report.display());
            Ok(())
        }
        Command::MakeMasks { pattern, rate, nv, nt, seed, out, nodes, len } => {
            let mask = match pattern {
                PatternArg::Random => generate_random_mask((nodes, len), rate, seed)?,
                PatternArg::Block => {
                    let graph = ring_graph(nodes);
                    generate_block_mask((nodes, len), rate, nv, nt, &graph, seed)?
                }
            };
            // rows are timestamps to match the series CSV layout
            let as_f64 = Array2::from_shape_fn((len, nodes), |(t, i)| mask[[i, t]] as f64);
            write_matrix_csv(&out, &as_f64)?;
            let missing = mask.iter().filter(|&&v| v == 0).count();
            println!(
                "mask {} x {} written to {} ({missing} missing entries)",
                len,
                nodes,
                out.display()
            );
            Ok(())
        }
        Command::Ablate { config, variant } => {
            let cfg = ExperimentConfig::load(&config)?;
            let name = match variant {
                VariantArg::NoBis4pi => "no_bis4pi",
                VariantArg::NoGatedAttention => "no_gated_attention",
            };
            let metrics = run_ablation(&cfg, name)?;
            println!("variant = {name}");
            println!("mae = {:?}", metrics.mae);
            println!("rmse = {:?}", metrics.rmse);
            Ok(())
        }
    }
}

/// Complete a full series file: window it, impute each window with the
/// checkpointed model, and splice the medians back into the original layout.
fn impute_series(
    ck: &Checkpoint,
    data: &std::path::Path,
    mask_path: &std::path::Path,
    k: usize,
) -> Result<Array2<f64>> {
    let cfg = &ck.config;
    let table = load_series_csv(data, &cfg.missing_token)?;
    if table.n_nodes() != ck.n_nodes {
        return Err(AdastiError::contract(format!(
            "checkpoint was trained on {} nodes but series has {}",
            ck.n_nodes,
            table.n_nodes()
        )));
    }
    let mask_f = load_matrix_csv(mask_path)?;
    if mask_f.dim() != table.values.dim() {
        return Err(AdastiError::contract(format!(
            "mask shape {:?} does not match series shape {:?}",
            mask_f.dim(),
            table.values.dim()
        )));
    }
    let mut mask = Array2::<u8>::zeros(mask_f.dim());
    for (ix, &v) in mask_f.indexed_iter() {
        mask[ix] = match v {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            _ => return Err(AdastiError::contract(format!("mask entries must be 0 or 1, got {v}"))),
        };
    }

    let windows = window_and_normalize(&table, cfg.window_len, cfg.window_len, cfg.train_fraction)?;
    let model = ck.model();
    let a_hat = adasti::train::a_hat_for(cfg, ck.n_nodes)?;
    let sched = cfg.schedule()?;

    // output starts as the input values; imputed cells are overwritten below
    let mut out = table.values.clone();
    for (w, native) in windows.into_iter().enumerate() {
        let t0 = w * cfg.window_len;
        // the model observes the intersection of native observations and the
        // user-provided mask
        let m = Array2::from_shape_fn(native.m.dim(), |(i, j)| {
            native.m[[i, j]] & mask[[t0 + j, i]]
        });
        let x = Array2::from_shape_fn(native.x.dim(), |ix| {
            if m[ix] == 1 { native.x[ix] } else { 0.0 }
        });
        let sample = MaskedSample { x, m, norm_stats: native.norm_stats };
        if sample.m.iter().all(|&v| v == 1) {
            continue;
        }
        let seed = cfg.seed.wrapping_add(w as u64);
        let result = impute(&model, &sample, &a_hat, &sched, k, seed, cfg.literal_reverse_coeffs)?;
        let pred = sample.denormalize(&result.median)?;
        for ((i, j), &m) in sample.m.indexed_iter() {
            if m == 0 {
                out[[t0 + j, i]] = pred[[i, j]];
            }
        }
    }
    Ok(out)
}
