use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semclone_core::detector::Pooling;
use semclone_core::pipeline::{self, RunConfig};
use semclone_core::Error;

/// Semantic clone detection from runtime behavior models.
#[derive(Debug, Parser)]
#[command(name = "semclone", version)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (traces/, models/, reports/ below it).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores; 1 gives a serial run).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Selection {
    /// Subject names separated by commas, or `all`.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct Detection {
    /// `hard` or `soft` combination of the two directions.
    #[arg(long, value_parser = parse_pooling)]
    pooling: Option<Pooling>,
    /// Total Type-1 error, in (0, 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Samples drawn per link.
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the instrumented subjects and write trace files.
    Generate {
        #[command(flatten)]
        sel: Selection,
        /// Top-level invocations per subject.
        #[arg(long)]
        invocations: Option<usize>,
    },
    /// Train one model per executable.
    Train {
        #[command(flatten)]
        sel: Selection,
        /// Train only these executable ids.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
    /// Decide every candidate pair under one configuration.
    Detect {
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        det: Detection,
    },
    /// Run the pooling x type-1 x particles experiment grid.
    Evaluate {
        #[command(flatten)]
        sel: Selection,
        #[command(flatten)]
        det: Detection,
        /// Restrict the grid, e.g. `particles=10` or `pooling=soft;alpha=0.01`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Summarize the reports already written.
    Report,
}

fn parse_pooling(s: &str) -> Result<Pooling, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn build_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    let select = |cfg: &mut RunConfig, sel: &Selection| {
        if let Some(s) = &sel.subjects {
            cfg.subjects = s.clone();
        }
    };
    let detect = |cfg: &mut RunConfig, det: &Detection| {
        if let Some(p) = det.pooling {
            cfg.detector.pooling = p;
        }
        if let Some(a) = det.alpha {
            cfg.detector.alpha = a;
        }
        if let Some(n) = det.particles {
            cfg.detector.particles = n;
        }
    };
    match &cli.command {
        Command::Generate { sel, invocations } => {
            select(&mut cfg, sel);
            if let Some(n) = invocations {
                cfg.corpus.invocations = *n;
            }
        }
        Command::Train { sel, only } => {
            select(&mut cfg, sel);
            if let Some(o) = only {
                cfg.only = o.clone();
            }
        }
        Command::Detect { sel, det } => {
            select(&mut cfg, sel);
            detect(&mut cfg, det);
        }
        Command::Evaluate { sel, det, grid } => {
            select(&mut cfg, sel);
            detect(&mut cfg, det);
            if let Some(g) = grid {
                cfg.grid = cfg.grid.clone().restrict(g)?;
            }
            // a single-value flag pins that grid axis
            if let Some(p) = det.pooling {
                cfg.grid.pooling = vec![p];
            }
            if let Some(a) = det.alpha {
                cfg.grid.alpha = vec![a];
            }
            if let Some(n) = det.particles {
                cfg.grid.particles = vec![n];
            }
        }
        Command::Report => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = build_config(cli)?;
    match &cli.command {
        Command::Generate { .. } => {
            let out = pipeline::cmd_generate(&cfg)?;
            let execs: usize = out.iter().map(|s| s.executables.len()).sum();
            for s in &out {
                println!("{}: {} events -> {}", s.subject, s.events, s.trace_file.display());
            }
            println!("{} trace files, {} executable profiles", out.len(), execs);
        }
        Command::Train { .. } => {
            let summary = pipeline::cmd_train_with(&cfg, &progress)?;
            for e in &summary.trained {
                println!(
                    "{}: valid nll {:.4} (initial {:.4}), {} epochs",
                    e.executable, e.best_valid_nll, e.initial_valid_nll, e.epochs
                );
            }
            for f in &summary.failed {
                println!("{}: FAILED: {}", f.executable, f.error);
            }
            println!("{} model(s) trained, {} failed", summary.trained.len(), summary.failed.len());
            if let Some(code) = summary.failed.iter().map(|f| f.exit_code).max() {
                return Ok(code as u8);
            }
        }
        Command::Detect { .. } => {
            let report = pipeline::cmd_detect(&cfg)?;
            for v in &report.verdicts {
                println!(
                    "{} ~ {}: {} (pooled {:.3}, threshold {:.3}, {})",
                    v.exec_a,
                    v.exec_b,
                    if v.is_clone() { "clone" } else { "distinct" },
                    v.best.pooled_statistic,
                    v.best.threshold,
                    v.best.matching.describe()
                );
            }
            println!(
                "{} pairs evaluated, {} skipped without a valid matching; reports in {}",
                report.verdicts.len(),
                report.skipped.len(),
                cfg.reports_dir().display()
            );
        }
        Command::Evaluate { .. } => {
            pipeline::cmd_evaluate_with(&cfg, &progress)?;
            print!("{}", pipeline::cmd_report(&cfg)?);
        }
        Command::Report => print!("{}", pipeline::cmd_report(&cfg)?),
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
