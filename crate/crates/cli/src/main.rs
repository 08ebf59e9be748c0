//! Command-line entry points: pretraining, linear probe, fine-tune,
//! embedding extraction, checkpoint inspection and synthetic data.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};

use twinspec_core::checkpoint::load_checkpoint;
use twinspec_core::config::RunConfig;
use twinspec_core::data::{synth_dataset, Manifest, SynthSpec};
use twinspec_core::eval::{
    extract_embeddings, finetune, linear_probe, write_embeddings, EvalReport, InitKind,
};
use twinspec_core::model::EncoderParams;
use twinspec_core::trainer::{encoder_from_checkpoint, run_pretraining};
use twinspec_core::Error;

#[derive(Parser)]
#[command(
    name = "twinspec",
    about = "Self-supervised audio representations via twin-view decorrelation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining over the train split of a manifest.
    Pretrain {
        /// TOML run configuration; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV manifest (path,label,split).
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoints, metrics log and config snapshot.
        #[arg(long)]
        out_dir: PathBuf,
        /// Random seed (flag > DELORES_SEED env > config file).
        #[arg(long, env = "DELORES_SEED")]
        seed: Option<u64>,
        /// Epoch count; also pins the cosine schedule end.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Worker threads (1 = deterministic single-threaded mode).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Linear evaluation: freeze the encoder, train only a linear head.
    #[command(group(ArgGroup::new("init").required(true).args(["checkpoint", "random_init"])))]
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate a randomly initialized encoder instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report JSON destination.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "downstream")]
        task: String,
        #[arg(long, env = "DELORES_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Transfer learning: fine-tune encoder and head end to end.
    #[command(group(ArgGroup::new("init").required(true).args(["checkpoint", "random_init"])))]
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "downstream")]
        task: String,
        #[arg(long, env = "DELORES_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write eval-mode embeddings for every manifest record.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarize a checkpoint: version, counters, config, arrays.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate a synthetic tone-cluster dataset with a manifest.
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, env = "DELORES_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        duration_s: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = if e.is_config() {
                1
            } else if e.is_data() {
                2
            } else {
                3
            };
            ExitCode::from(code)
        }
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        twinspec_core::set_compute_threads(n);
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Encoder plus config for downstream commands: either restored from a
/// checkpoint (whose model/dsp settings are authoritative) or freshly
/// initialized from the CLI config.
fn resolve_encoder(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<(EncoderParams, RunConfig, InitKind), Error> {
    let cli_cfg = load_config(config, seed)?;
    match checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut cfg = ckpt.config.clone();
            // downstream optimizer settings come from the CLI side
            cfg.adam = cli_cfg.adam.clone();
            cfg.seed = cli_cfg.seed;
            let enc = encoder_from_checkpoint(&ckpt, &cfg.model)?;
            Ok((enc, cfg, InitKind::Pretrained))
        }
        None => {
            cli_cfg.validate()?;
            let enc = EncoderParams::seeded(&cli_cfg.model, cli_cfg.seed)?;
            Ok((enc, cli_cfg, InitKind::Random))
        }
    }
}

fn write_report(report: &EvalReport, out: &Path) -> Result<(), Error> {
    let json =
        serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out, json).map_err(|e| Error::io(out, e))?;
    print!("{}", EvalReport::table(std::slice::from_ref(report)));
    println!("report written to {}", out.display());
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Pretrain {
            config,
            manifest,
            out_dir,
            seed,
            epochs,
            batch_size,
            resume,
            threads,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(e) = epochs {
                cfg.trainer.epochs = e;
                cfg.schedule.total_epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.trainer.batch_size = b;
            }
            init_threads(threads.or(cfg.threads));
            let manifest = Manifest::load(&manifest)?;
            let (ckpt, path) = run_pretraining(&cfg, &manifest, &out_dir, resume.as_deref())?;
            println!(
                "pretraining done: {} epochs, {} steps, checkpoint at {}",
                ckpt.epoch,
                ckpt.step,
                path.display()
            );
            Ok(())
        }
        Command::Probe {
            checkpoint,
            random_init: _,
            manifest,
            config,
            out,
            task,
            seed,
            threads,
        } => {
            init_threads(threads);
            let (enc, cfg, init) =
                resolve_encoder(checkpoint.as_deref(), config.as_deref(), seed)?;
            let manifest = Manifest::load(&manifest)?;
            let report = linear_probe(&enc, &cfg, &manifest, &task, init)?;
            write_report(&report, &out)
        }
        Command::Finetune {
            checkpoint,
            random_init: _,
            manifest,
            config,
            out,
            task,
            seed,
            threads,
        } => {
            init_threads(threads);
            let (enc, cfg, init) =
                resolve_encoder(checkpoint.as_deref(), config.as_deref(), seed)?;
            let manifest = Manifest::load(&manifest)?;
            let report = finetune(&enc, &cfg, &manifest, &task, init)?;
            write_report(&report, &out)
        }
        Command::Extract {
            checkpoint,
            manifest,
            out,
            batch_size,
            threads,
        } => {
            init_threads(threads);
            let ckpt = load_checkpoint(&checkpoint)?;
            let enc = encoder_from_checkpoint(&ckpt, &ckpt.config.model)?;
            let manifest = Manifest::load(&manifest)?;
            let rows = extract_embeddings(&enc, &ckpt.config, &manifest, batch_size)?;
            write_embeddings(&out, &rows)?;
            println!(
                "wrote {} embeddings of width {} to {}",
                rows.len(),
                rows.first().map(|(_, v)| v.len()).unwrap_or(0),
                out.display()
            );
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            println!("checkpoint: {}", checkpoint.display());
            println!("epoch: {}  step: {}", ckpt.epoch, ckpt.step);
            println!(
                "model: channels={} fc_dim={} proj_dim={}",
                ckpt.config.model.channels, ckpt.config.model.fc_dim, ckpt.config.model.proj_dim
            );
            println!(
                "trainer: epochs={} batch_size={} lambda={}",
                ckpt.config.trainer.epochs,
                ckpt.config.trainer.batch_size,
                ckpt.config.trainer.lambda
            );
            println!("arrays: {}", ckpt.arrays().len());
            for (name, arr) in ckpt.arrays().iter().take(40) {
                println!("  {name}: {:?}", arr.shape());
            }
            if ckpt.arrays().len() > 40 {
                println!("  ... and {} more", ckpt.arrays().len() - 40);
            }
            if let Some(last) = ckpt.metrics_tail.last() {
                println!(
                    "last step: total={:.6} invariance={:.6} redundancy={:.6} lr={:.6}",
                    last.total, last.invariance, last.redundancy, last.lr
                );
            }
            Ok(())
        }
        Command::Synth {
            classes,
            per_class,
            out_dir,
            seed,
            duration_s,
        } => {
            let spec = SynthSpec {
                classes,
                per_class,
                duration_s,
                seed,
            };
            let manifest = synth_dataset(&spec, &out_dir)?;
            println!(
                "wrote {} clips over {} classes to {} (manifest.csv included)",
                manifest.records().len(),
                manifest.num_classes(),
                out_dir.display()
            );
            Ok(())
        }
    }
}
