//! Command-line front end: `gen`, `train`, `eval`, `gradcheck`, `ablate`.
//!
//! Every command writes files under `--out` (created if absent) and maps
//! errors to stable exit codes: 0 success, 2 config/io, 3 numeric,
//! 4 shape/compatibility.

pub mod ablate;
pub mod gradcheck;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{DvrError, Result};
use crate::evalkit::{evaluate, DEFAULT_FAR_LEVELS};
use crate::persistence::{load_config, load_split, load_state, save_split, save_state, write_atomic, RunConfig};
use crate::synthdata::{generate_split, ProtocolSplit};
use crate::trainer::{train, Ablation, ModelState};

pub const DATASET_FILE: &str = "dataset.dvrd";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "dvr", version, about = "Cross-modality matching with disentangled variational representations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its train/gallery/probe split.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train, writing the final checkpoint and the per-epoch log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma list of no-dvr, no-meandisc, no-corralign.
        #[arg(long)]
        ablation: Option<String>,
        /// Dataset written by `gen`; regenerated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint's extractor on the probe/gallery protocol.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// FAR levels for the verification rate.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FAR_LEVELS.to_vec())]
        far: Vec<f64>,
    },
    /// Compare every analytic gradient with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Test hook: corrupt the analytic gradient of this parameter block.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run the four-row ablation matrix over several seeds.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        ablation: Option<String>,
    },
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    Ok(match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DvrError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<ProtocolSplit> {
    match data {
        Some(path) => load_split(path),
        None => generate_split(&cfg.synth),
    }
}

pub fn run_gen(common: &CommonArgs) -> Result<PathBuf> {
    let cfg = resolve_config(common)?;
    prepare_out(&common.out)?;
    let split = generate_split(&cfg.synth)?;
    let path = common.out.join(DATASET_FILE);
    save_split(&split, &path)?;
    Ok(path)
}

pub fn run_train(
    common: &CommonArgs,
    checkpoint: Option<&Path>,
    ablation: Option<&str>,
    data: Option<&Path>,
) -> Result<ModelState> {
    let mut cfg = resolve_config(common)?;
    if let Some(flags) = ablation {
        cfg.train.ablation = Ablation::parse(flags)?;
    }
    prepare_out(&common.out)?;
    let split = dataset(&cfg, data)?;
    let mut state = match checkpoint {
        Some(path) => load_state(path)?,
        None => ModelState::init(&cfg.train, split.train.raw.cols(), split.num_classes())?,
    };
    let ckpt_dir = common.out.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        prepare_out(&ckpt_dir)?;
    }
    let log = train(&mut state, &split.train, &cfg.train, Some(&ckpt_dir))?;
    save_state(&state, &common.out.join(CHECKPOINT_FILE))?;
    write_text(&common.out.join(TRAIN_LOG_FILE), &log.to_csv())?;
    Ok(state)
}

pub fn run_eval(common: &CommonArgs, checkpoint: &Path, data: Option<&Path>, far: &[f64]) -> Result<crate::evalkit::EvalReport> {
    if far.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(DvrError::invalid("FAR levels must lie in [0, 1]"));
    }
    let cfg = resolve_config(common)?;
    prepare_out(&common.out)?;
    let state = load_state(checkpoint)?;
    let split = dataset(&cfg, data)?;
    let report = evaluate(&state.recog, &split, far)?;
    report.write_csvs(&common.out)?;
    Ok(report)
}

pub fn run_gradcheck(common: &CommonArgs, instances: usize, fault: Option<&str>) -> Result<gradcheck::GradcheckReport> {
    let cfg = resolve_config(common)?;
    prepare_out(&common.out)?;
    let report = gradcheck::run_gradcheck(cfg.train.seed, instances, gradcheck::InstanceShape::default(), fault)?;
    write_text(&common.out.join(GRADCHECK_FILE), &report.to_csv())?;
    Ok(report)
}

pub fn run_ablate(common: &CommonArgs, seeds: usize) -> Result<ablate::AblationTable> {
    if seeds == 0 {
        return Err(DvrError::invalid("--seeds must be >= 1"));
    }
    let cfg = resolve_config(common)?;
    prepare_out(&common.out)?;
    let table = ablate::run_ablate(&cfg, cfg.train.seed, seeds, &DEFAULT_FAR_LEVELS)?;
    write_text(&common.out.join(ABLATION_FILE), &table.to_csv())?;
    Ok(table)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let path = run_gen(&common)?;
            println!("wrote {}", path.display());
        }
        Command::Train {
            common,
            checkpoint,
            ablation,
            data,
        } => {
            let state = run_train(&common, checkpoint.as_deref(), ablation.as_deref(), data.as_deref())?;
            let p = state.progress;
            println!(
                "trained: {} pretrain, {} warm-up, {} main epochs; wrote {}",
                p.pretrain_epochs,
                p.warmup_epochs,
                p.epochs,
                common.out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            far,
        } => {
            let report = run_eval(&common, &checkpoint, data.as_deref(), &far)?;
            print!("{}", report.metrics_csv());
        }
        Command::Gradcheck {
            common,
            instances,
            inject_fault,
        } => {
            let report = run_gradcheck(&common, instances, inject_fault.as_deref())?;
            print!("{}", report.to_csv());
            if let Some(worst) = report.failures().first() {
                return Err(DvrError::GradientMismatch {
                    term: worst.term.into(),
                    block: worst.block.into(),
                    rel_err: worst.max_rel_err,
                });
            }
        }
        Command::Ablate { common, seeds, ablation } => {
            if ablation.is_some() {
                return Err(DvrError::invalid("ablate always runs the full matrix; drop --ablation"));
            }
            let table = run_ablate(&common, seeds)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}
