use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pseudoview::experiments::{
    evaluate, generate_split, param_counts, read_dir, read_reports, run_ablation, run_training, seed_mean, write_dir,
    write_reports, Axis, Datasets, RunConfig, RunReport, Runner, SplitConfig,
};
use pseudoview::model::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(name = "pseudoview", version, about = "Perspective-prototype segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration, then save a checkpoint and its report.
    Train {
        /// TOML run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Log every N iterations (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on a generated split or a sample directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Run config whose data section defines the split.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of `.pvs` samples; overrides `--split`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Sweep one axis over values and seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis defaults when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Write synthetic samples, one file each.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Summarise reports in a directory and print parameter counts.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Config for the parameter comparison; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default run config as TOML.
    Config,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn split_config(cfg: &RunConfig, split: Split) -> SplitConfig {
    match split {
        Split::Train => cfg.data.train.clone(),
        Split::Test => cfg.data.test.clone(),
    }
}

fn fmt_iou(iou: &[Option<f64>]) -> String {
    iou.iter()
        .map(|v| v.map_or("-".to_string(), |v| format!("{:.3}", v)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn train(config: Option<&Path>, out: &Path, log_every: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let data = Datasets::generate(&cfg.data)?;
    eprintln!("training on {} samples, testing on {}", data.train.len(), data.test.len());
    let (state, mut report) = run_training(&cfg, &data, |s| {
        if log_every > 0 && s.iteration % log_every == 0 {
            eprintln!(
                "iter {:>5} {:?} loss {:.4} (seg {:.4}, rec {:.4}) lr {:.2e}",
                s.iteration, s.phase, s.loss.total, s.loss.seg, s.loss.rec, s.lr
            );
        }
    })?;
    report.name = "train".into();
    std::fs::create_dir_all(out)?;
    save_checkpoint(&out.join("checkpoint.pvck"), &state)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    write_reports(out, std::slice::from_ref(&report))?;
    println!("mIoU {:.4}  per-class [{}]", report.miou.unwrap_or(f64::NAN), fmt_iou(&report.per_class_iou));
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(checkpoint: &Path, split: Split, config: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let state = load_checkpoint(checkpoint)?;
    let samples = match data {
        Some(dir) => read_dir(dir)?,
        None => {
            let data = Datasets::generate(&load_config(config)?.data)?;
            match split {
                Split::Train => data.train,
                Split::Test => data.test,
            }
        }
    };
    if samples.is_empty() {
        bail!("no samples to evaluate");
    }
    let e = evaluate(&state, &samples)?;
    println!("samples {}  iteration {}", samples.len(), state.iteration);
    println!("mIoU {:.4}  per-class [{}]", e.miou, fmt_iou(&e.per_class_iou));
    Ok(())
}

fn ablate(axis: &str, values: Vec<String>, seeds: &[u64], config: Option<&Path>, out: &Path) -> Result<bool> {
    let axis: Axis = axis.parse()?;
    let base = load_config(config)?;
    let values = if values.is_empty() { axis.default_values() } else { values };
    let mut runner = Runner::new(Datasets::generate(&base.data)?);
    runner.verbose = true;
    let reports = run_ablation(&mut runner, &base, axis, &values, seeds);
    write_reports(out, &reports)?;
    println!("{:<12} {:>8}", axis.name(), "mIoU");
    for v in &values {
        match seed_mean(&reports, v) {
            Some(m) => println!("{v:<12} {m:>8.4}"),
            None => println!("{v:<12} {:>8}", "failed"),
        }
    }
    let failures: Vec<&RunReport> = reports.iter().filter(|r| !r.ok()).collect();
    for r in &failures {
        eprintln!("{}: {}", r.name, r.status);
    }
    Ok(failures.is_empty())
}

fn gen_data(count: usize, seed: u64, out: &Path, split: Split) -> Result<()> {
    let cfg = RunConfig::default();
    let mut sc = split_config(&cfg, split);
    sc.scenes = count.div_ceil(sc.views_per_scene.max(1));
    let mut samples = generate_split(&sc, &cfg.data.scene, seed)?;
    samples.truncate(count);
    let paths = write_dir(out, &samples)?;
    println!("wrote {} samples to {}", paths.len(), out.display());
    Ok(())
}

fn report(dir: &Path, config: Option<&Path>) -> Result<()> {
    let reports = if dir.join("reports.jsonl").exists() { read_reports(dir)? } else { Vec::new() };
    if !reports.is_empty() {
        println!("{:<36} {:>6} {:>8} {:>8}  status", "run", "seed", "mIoU", "secs");
        for r in &reports {
            let miou = r.miou.map_or("-".to_string(), |m| format!("{m:.4}"));
            println!("{:<36} {:>6} {:>8} {:>8.1}  {}", r.name, r.seed, miou, r.wall_clock_secs, r.status);
        }
    }
    let cfg = load_config(config)?;
    let (full, plain) = param_counts(&cfg.model)?;
    println!("parameters: {full} (perspective network)");
    println!("parameters: {plain} (plain-attention network)");
    println!("overhead: {:+.2}%", 100.0 * (full as f64 / plain as f64 - 1.0));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, log_every } => train(config.as_deref(), &out, log_every).map(|_| true),
        Command::Eval { checkpoint, split, config, data } => {
            eval(&checkpoint, split, config.as_deref(), data.as_deref()).map(|_| true)
        }
        Command::Ablate { axis, values, seeds, config, out } => ablate(&axis, values, &seeds, config.as_deref(), &out),
        Command::GenData { count, seed, out, split } => gen_data(count, seed, &out, split).map(|_| true),
        Command::Report { dir, config } => report(&dir, config.as_deref()).map(|_| true),
        Command::Config => {
            print!("{}", RunConfig::default().to_toml());
            Ok(true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
