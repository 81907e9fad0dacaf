//! Command-line front end: train, evaluate, count FLOPs, generate data and
//! run the numerical self-check.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mswin::config::{parse_extent, RunConfig};
use mswin::data::{gen_synthetic, write_directory, SyntheticConfig};
use mswin::flops::flops_estimate;
use mswin::infer::{evaluate, Protocol};
use mswin::metrics::eval_record;
use mswin::model::SegModel;
use mswin::train::{load_datasets, Trainer};
use mswin::{Error, Result};

#[derive(Parser)]
#[command(name = "mswin", version, about = "Convolution-free segmentation with multi-shifted-window decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the metrics log and checkpoint named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on the configured evaluation set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multi-scale (and flip) prediction with the config's eval settings.
        #[arg(long)]
        ms: bool,
    },
    /// Analytic FLOPs of the configured model at an input size.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Input extent, `HxW`.
        #[arg(long, default_value = "512x512")]
        size: String,
    },
    /// Write a synthetic dataset as PNG image and mask pairs.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Gradient checks and attention oracles.
    Selfcheck,
}

fn train(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (train, eval) = load_datasets(&cfg)?;
    log::info!("{} training and {} evaluation samples", train.len(), eval.len());
    let mut trainer = Trainer::new(&cfg)?;
    let report = trainer.run(&train, &eval)?;
    for line in &report.log {
        println!("{line}");
    }
    if cfg.train.checkpoint.is_none() {
        log::warn!("no train.checkpoint configured, parameters were not saved");
    }
    Ok(())
}

fn eval(config: &Path, checkpoint: &Path, ms: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (_, samples) = load_datasets(&cfg)?;
    let (model, mut params) = SegModel::new::<f32>(&cfg.model, cfg.train.seed)?;
    params.load(checkpoint)?;
    let protocol = if ms { Protocol { scales: cfg.eval.scales.clone(), flip: cfg.eval.flip, tile: None } } else { Protocol::single_scale() };
    let cm = evaluate(&model, &params, &samples, &protocol)?;
    println!("{}", eval_record(&cm)?);
    if let Some(path) = &cfg.eval.confusion_csv {
        cm.write_csv(path)?;
    }
    Ok(())
}

fn flops(config: &Path, size: &str) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (h, w) = parse_extent(size)?;
    let report = flops_estimate(&cfg.model, h, w)?;
    for (name, f) in &report.parts {
        println!("{name:<10} {:>12.3} GFLOPs", *f as f64 / 1e9);
    }
    println!("{:<10} {:>12.3} GFLOPs", "total", report.giga());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => train(&config),
        Command::Eval { config, checkpoint, ms } => eval(&config, &checkpoint, ms),
        Command::Flops { config, size } => flops(&config, &size),
        Command::GenData { seed, count, out, size, classes } => {
            let samples = gen_synthetic(seed, count, &SyntheticConfig::new(size, size, classes))?;
            write_directory(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
        Command::Selfcheck => {
            let checks = mswin::selfcheck::run();
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} of {} checks failed", checks.len())));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
