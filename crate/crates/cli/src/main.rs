use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualm::evals::Protocol;
use dualm_cli::commands;
use dualm_cli::config::RunConfig;
use dualm_cli::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "dualm",
    version,
    about = "Dual autoregressive / masked-diffusion language model experiments"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 1 gives the single-threaded reference run.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Evaluation protocol; repeat to select several.
    #[arg(long, global = true, value_parser = parse_protocol)]
    protocol: Vec<Protocol>,

    /// Output directory (default: config `out`, then $DUALM_OUT, then `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a BPE vocabulary on the corpus.
    Tokenize,
    /// Train one model and write its checkpoint and metrics.
    Train,
    /// Score a checkpoint on the configured tasks.
    Eval {
        /// Checkpoint to score (default: model.ckpt in the output directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score every repetitions × ratio cell.
    Sweep,
    /// Fit the interpolating Gaussian process to sweep results.
    Analyze {
        /// Results CSV written by `sweep`.
        results: PathBuf,
    },
    /// Show the left-shift construction on a rational sequence.
    Rasp {
        /// Values such as "1 2/3 -4".
        sequence: String,
    },
    /// Write a synthetic corpus, tasks and a starter config.
    Fixture {
        #[arg(long, default_value_t = 600_000)]
        bytes: usize,
        #[arg(long, default_value_t = 64)]
        tasks: usize,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: dualm::Error| e.to_string())
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("", Path::new("."))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(j) = cli.jobs {
        dualm::par::set_threads(j)?;
    }
    let cfg = load_config(&cli)?;
    let out = cfg.out_dir(cli.out.as_deref());
    let protocols = if cli.protocol.is_empty() {
        cfg.eval.protocols.clone()
    } else {
        cli.protocol.clone()
    };
    match &cli.command {
        Command::Tokenize => {
            let p = commands::tokenize(&cfg, &out)?;
            println!("wrote {}", p.display());
        }
        Command::Train => {
            let s = commands::train(&cfg, &out)?;
            println!(
                "trained {} steps; final val loss ar {:.4} diff {:.4}; overfit ar {} diff {}",
                s.steps, s.final_ar_val, s.final_diff_val, s.overfit_ar, s.overfit_diff
            );
            println!(
                "wrote {} and {}",
                s.checkpoint.display(),
                s.metrics.display()
            );
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| out.join(commands::CHECKPOINT_FILE));
            for r in commands::eval(&cfg, &ckpt, &protocols, &out)? {
                println!("{}: aggregate {:.2}", r.protocol, r.aggregate);
            }
            println!("wrote {}", out.join(commands::SCORES_FILE).display());
        }
        Command::Sweep => {
            let s = commands::sweep(&cfg, &protocols, &out)?;
            println!(
                "{} records, {} skipped cells; wrote {}",
                s.records,
                s.skipped,
                s.results.display()
            );
        }
        Command::Analyze { results } => {
            let protocol = match protocols.as_slice() {
                [p] => *p,
                _ => {
                    return Err(CliError::Usage(
                        "analyze needs exactly one --protocol".into(),
                    ))
                }
            };
            let s = commands::analyze(&cfg, results, protocol, &out)?;
            println!(
                "fit {} points: R² {:.4}, log marginal likelihood {:.3}; wrote {} and {}",
                s.points,
                s.r_squared,
                s.log_marginal_likelihood,
                s.grid.display(),
                s.density.display()
            );
        }
        Command::Rasp { sequence } => print!("{}", commands::rasp_demo(sequence)?),
        Command::Fixture { bytes, tasks } => {
            for p in commands::fixture(&out, *bytes, *tasks, cfg.seed)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
