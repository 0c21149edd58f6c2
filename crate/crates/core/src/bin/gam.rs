//! `gam`: verification suites, relative-position inspection and training.
//!
//! Exit status is 0 on success, 1 when a check fails (or training diverges)
//! and 2 for usage, configuration and I/O errors.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gam_core::verify::{equiv_check, grad_check, EQUIVALENCE_TOLERANCE, GRADIENT_TOLERANCE};
use gam_core::{build_r, evaluate, train, Checkpoint, GamError, Metric, RunConfig, TaskSpec};

#[derive(Parser)]
#[command(name = "gam", version, about = "Generalized attention: checks, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a single-brain GAM head reproduces scaled dot-product attention.
    EquivCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Add EPS to every brain entry (negative control).
        #[arg(long, value_name = "EPS", default_value_t = 0.0)]
        perturb: f64,
    },
    /// Compare analytic gradients of the full model with central differences.
    GradCheck {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        /// Corrupt the analytic gradient by EPS·(1+|g|) (negative control).
        #[arg(long, value_name = "EPS", default_value_t = 0.0)]
        perturb: f64,
    },
    /// Print the relative-position vectors for strictly increasing locations.
    Rvec {
        /// Comma-separated corpus locations, e.g. `0,1,3`.
        locations: String,
    },
    /// Train a model and stream `step,loss,accuracy` records.
    Train {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Override `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Metric stream destination; stdout when absent.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Write the final checkpoint here.
        #[arg(long, value_name = "PATH")]
        save: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Accuracy of a saved checkpoint on freshly seeded batches.
    Eval {
        #[arg(long, value_name = "PATH")]
        load: PathBuf,
        /// Evaluation seed; defaults to the one training used.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batches: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override the task's sequence length.
        #[arg(long)]
        n: Option<usize>,
        /// Override the gap task's largest location gap.
        #[arg(long)]
        max_gap: Option<u64>,
    },
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<GamError> for Failure {
    fn from(e: GamError) -> Self {
        match e {
            GamError::Diverged { .. } | GamError::NonFinite(_) | GamError::FullyMaskedRow { .. } => {
                Failure::Check(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("FAIL: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::EquivCheck { seed, trials, perturb } => {
            let report = equiv_check(seed, trials, perturb)?;
            println!("trials {}", report.trials);
            println!("max deviation {:e} (tolerance {:e})", report.max_deviation, EQUIVALENCE_TOLERANCE);
            match report.failing_seed {
                None => Ok(()),
                Some(s) => Err(Failure::Check(format!("deviation above tolerance, instance seed {s}"))),
            }
        }
        Command::GradCheck { config, seed, trials, batch_size, perturb } => {
            let cfg = RunConfig::load(&config)?;
            if batch_size == 0 {
                return Err(Failure::Usage("--batch-size must be positive".into()));
            }
            let report = grad_check(&cfg, seed, trials, batch_size, perturb)?;
            println!("trials {} (skipped for sign conflicts: {})", report.trials, report.skipped);
            for (group, err) in &report.groups {
                println!("{group:<24} {err:.3e}");
            }
            match &report.worst {
                Some((name, err)) if *err >= GRADIENT_TOLERANCE => Err(Failure::Check(format!(
                    "relative error {err:.3e} in {name} (tolerance {GRADIENT_TOLERANCE:e})"
                ))),
                _ => Ok(()),
            }
        }
        Command::Rvec { locations } => {
            let locs = locations
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Usage(format!("bad location list {locations:?}: {e}")))?;
            let r = build_r(&locs)?;
            for row in r.to_rows() {
                let cells: Vec<String> = row.iter().map(u64::to_string).collect();
                println!("{}", cells.join(" "));
            }
            Ok(())
        }
        Command::Train { config, seed, out, save, format } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let model = cfg.language_model()?;
            let mut sink: Box<dyn Write> = match &out {
                Some(path) => Box::new(BufWriter::new(File::create(path)?)),
                None => Box::new(io::stdout().lock()),
            };
            let outcome = train(&model, &cfg.task, &cfg.train)?;
            write_metrics(&mut sink, &outcome.metrics, format)?;
            sink.flush()?;
            if let Some(path) = save {
                Checkpoint::new(cfg, outcome.params).save(path)?;
            }
            Ok(())
        }
        Command::Eval { load, seed, batches, batch_size, n, max_gap } => {
            let ckpt = Checkpoint::load(&load)?;
            let mut cfg = ckpt.config.clone();
            match &mut cfg.task {
                TaskSpec::Copy { n: len, .. } => {
                    if max_gap.is_some() {
                        return Err(Failure::Usage("--max-gap applies only to the gap task".into()));
                    }
                    *len = n.unwrap_or(*len);
                }
                TaskSpec::Gap { n: len, max_gap: gap, .. } => {
                    *len = n.unwrap_or(*len);
                    *gap = max_gap.unwrap_or(*gap);
                }
            }
            if let Some(b) = batches {
                cfg.train.eval_batches = b;
            }
            if let Some(b) = batch_size {
                cfg.train.eval_batch_size = b;
            }
            cfg.validate()?;
            let model = cfg.language_model()?;
            let seed = seed.unwrap_or_else(|| cfg.train.eval_seed());
            let acc = evaluate(
                &model.with(&ckpt.params),
                &cfg.task,
                seed,
                cfg.train.eval_batches,
                cfg.train.eval_batch_size,
            )?;
            println!("accuracy {acc}");
            Ok(())
        }
    }
}

fn write_metrics(sink: &mut dyn Write, metrics: &[Metric], format: Format) -> io::Result<()> {
    if format == Format::Csv {
        writeln!(sink, "step,loss,accuracy")?;
    }
    for m in metrics {
        match format {
            Format::Csv => writeln!(sink, "{},{},{}", m.step, m.loss, m.accuracy)?,
            Format::Jsonl => writeln!(sink, "{}", serde_json::to_string(m).map_err(io::Error::other)?)?,
        }
    }
    Ok(())
}
