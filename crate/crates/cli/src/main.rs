use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mone_cli::commands::{self, PruneArgs};
use mone_cli::config::{
    parse_freq_norm, parse_generator_kind, parse_method, parse_mode, RunConfig,
};
use mone_core::error::{MoneError, Result};
use mone_core::pruning::BuildOptions;

#[derive(Parser)]
#[command(
    name = "mone",
    version,
    about = "Expert pruning for MoE language models: calibrate, score, replace redundant experts with novices, evaluate"
)]
struct Cli {
    /// Run configuration (JSON); defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory against which relative paths are resolved.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,

    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded model checkpoint and print parameter counts.
    GenModel {
        #[arg(long, default_value = "model.ckpt")]
        out: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_layers: Option<usize>,
        #[arg(long)]
        n_experts: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        d_expert: Option<usize>,
        /// Model parameter seed (defaults to the config's model seed).
        #[arg(long)]
        model_seed: Option<u64>,
        #[arg(long)]
        renormalize_gates: bool,
    },
    /// Generate a seeded synthetic token corpus.
    GenData {
        #[arg(long, default_value = "corpus.monc")]
        out: PathBuf,
        /// Generator (source) seed; defaults to the config's corpus seed.
        #[arg(long)]
        data_seed: Option<u64>,
        #[arg(long)]
        n_sequences: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        /// markov or uniform.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Stream the first N corpus sequences through a model and save
    /// per-expert statistics.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value = "calibration.bin")]
        out: PathBuf,
    },
    /// Score experts, select a prune set per layer, and emit the pruned
    /// checkpoint plus the plan.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        /// mone, var-only, freq-only, rs or random.
        #[arg(long, default_value = "mone")]
        method: String,
        #[arg(long)]
        ratio: f64,
        /// novice or drop.
        #[arg(long, default_value = "novice")]
        mode: String,
        /// Seed for the random method (defaults to the global seed).
        #[arg(long)]
        random_seed: Option<u64>,
        /// Frequency normalization: mean (score per activation) or volume
        /// (score mass per calibration token).
        #[arg(long)]
        freq_norm: Option<String>,
        /// Renormalize retained gates and drop novice terms entirely.
        #[arg(long)]
        renormalize_kept_gates: bool,
        #[arg(long, default_value = "pruned.ckpt")]
        out_model: PathBuf,
        #[arg(long, default_value = "plan.json")]
        out_plan: PathBuf,
    },
    /// Compare an original and a pruned checkpoint on a corpus.
    Eval {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate on the first N sequences only (default: all).
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Run the full method x ratio x mode x sample-size x source grid.
    Ablate {},
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(&commands::resolve(&cli.out_dir, path))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let out_dir = cli.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenModel {
            out,
            vocab_size,
            d_model,
            n_layers,
            n_experts,
            top_k,
            d_expert,
            model_seed,
            renormalize_gates,
        } => {
            let m = &mut cfg.model;
            if let Some(v) = vocab_size {
                m.vocab_size = v;
            }
            if let Some(v) = d_model {
                m.d_model = v;
            }
            if let Some(v) = n_layers {
                m.n_layers = v;
            }
            if let Some(v) = n_experts {
                m.n_experts = v;
            }
            if let Some(v) = top_k {
                m.top_k = v;
            }
            if let Some(v) = d_expert {
                m.d_expert = v;
            }
            if let Some(v) = model_seed {
                m.seed = v;
            }
            if renormalize_gates {
                m.renormalize_gates = true;
            }
            commands::cmd_gen_model(&cfg, &commands::resolve(&out_dir, &out))
        }
        Command::GenData { out, data_seed, n_sequences, seq_len, kind } => {
            if let Some(v) = n_sequences {
                cfg.corpus.n_sequences = v;
            }
            if let Some(v) = seq_len {
                cfg.corpus.seq_len = v;
            }
            if let Some(k) = kind {
                cfg.corpus.kind = parse_generator_kind(&k)?;
            }
            let seed = data_seed.unwrap_or(cfg.corpus.seed);
            commands::cmd_gen_data(&cfg, seed, &commands::resolve(&out_dir, &out))
        }
        Command::Calibrate { model, data, samples, out } => commands::cmd_calibrate(
            &commands::resolve(&out_dir, &model),
            &commands::resolve(&out_dir, &data),
            samples,
            &commands::resolve(&out_dir, &out),
        ),
        Command::Prune {
            model,
            calibration,
            method,
            ratio,
            mode,
            random_seed,
            freq_norm,
            renormalize_kept_gates,
            out_model,
            out_plan,
        } => {
            let args = PruneArgs {
                method: parse_method(&method, random_seed.unwrap_or(cfg.seed))?,
                ratio,
                mode: parse_mode(&mode)?,
                build: BuildOptions {
                    freq_norm: match freq_norm {
                        Some(name) => parse_freq_norm(&name)?,
                        None => cfg.pruning.freq_norm,
                    },
                    renormalize_kept_gates: renormalize_kept_gates
                        || cfg.pruning.renormalize_kept_gates,
                },
            };
            commands::cmd_prune(
                &commands::resolve(&out_dir, &model),
                &commands::resolve(&out_dir, &calibration),
                &args,
                &commands::resolve(&out_dir, &out_model),
                &commands::resolve(&out_dir, &out_plan),
            )
        }
        Command::Eval { original, pruned, data, samples, out } => commands::cmd_eval(
            &commands::resolve(&out_dir, &original),
            &commands::resolve(&out_dir, &pruned),
            &commands::resolve(&out_dir, &data),
            samples,
            &commands::resolve(&out_dir, &out),
        ),
        Command::Ablate {} => commands::cmd_ablate(&cfg, &out_dir).map(|_| ()),
    }
}

/// Exit codes: 0 success, 2 configuration or input error, 3 compatibility
/// or fingerprint mismatch, 4 I/O or file-format error.
fn exit_code(err: &MoneError) -> u8 {
    match err {
        MoneError::Config(_)
        | MoneError::Input(_)
        | MoneError::NumericInput(_)
        | MoneError::Shape(_)
        | MoneError::Json(_) => 2,
        MoneError::Compatibility(_) | MoneError::Comparison(_) => 3,
        MoneError::Io(_) | MoneError::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
