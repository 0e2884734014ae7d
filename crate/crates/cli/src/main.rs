use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use wedl_core::featstore::{save_features, FileFormat, SynthSpec, Warp};
use wedl_core::runner::{
    self, gradcheck, Checkpoint, DatasetSource, RunConfig, CHECKPOINT_FILE, REPORT_FILE,
};

#[derive(Parser)]
#[command(name = "wedl", version, about = "Weighted ensembles of metric-learning losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and (optionally) compress; writes report.json,
    /// curves.csv, metrics.json and model.ckpt.
    Train(TrainArgs),
    /// Re-evaluate a saved checkpoint on its unseen-class split.
    Eval(EvalArgs),
    /// Fit a compression regressor onto a trained WEDL checkpoint.
    Compress(CompressArgs),
    /// Check every analytic gradient against central differences.
    Gradcheck(GradArgs),
    /// Write a synthetic Gaussian-class feature file.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding model.ckpt; eval.json is written there.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Checkpoint path, if not `<out>/model.ckpt`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct CompressArgs {
    /// Run directory holding model.ckpt.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Take the compressor settings from this config instead of the
    /// checkpoint's own.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Directory for gradcheck.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Run config whose synthetic dataset spec is used; the flags below
    /// apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    sep: f64,
    #[arg(long, default_value = "none", value_parser = parse_warp)]
    warp: Warp,
    #[arg(long, default_value = "csv")]
    format: FileFormat,
}

fn parse_warp(s: &str) -> Result<Warp, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown warp `{s}` (expected none or tanh-mix)"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compress(a) => compress(a),
        Command::Gradcheck(a) => grad(a),
        Command::Synth(a) => synth(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let outcome = runner::run_to_dir(&config, &a.out)?;
    let r = &outcome.report;
    println!("mode        {}", config.mode);
    println!("config hash {}", r.config_hash);
    println!("weights     {:?}", r.final_weights);
    println!(
        "unseen      R@1 {:.4}  NMI {:.4}  kNN {:.4}",
        r.metrics.recall_at(1).unwrap_or(f64::NAN),
        r.metrics.nmi,
        r.metrics.knn_accuracy
    );
    if let Some(c) = &r.compression {
        println!(
            "compressed  R@1 {:.4}  NMI {:.4}  kNN {:.4}",
            c.metrics.recall_at(1).unwrap_or(f64::NAN),
            c.metrics.nmi,
            c.metrics.knn_accuracy
        );
    }
    println!("outputs in  {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let path = a.checkpoint.unwrap_or_else(|| a.out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let report = runner::evaluate_checkpoint(&ck)?;
    std::fs::create_dir_all(&a.out)?;
    runner::write_json(&a.out.join("eval.json"), &report)?;
    print_json(&report)?;
    Ok(ExitCode::SUCCESS)
}

fn compress(a: CompressArgs) -> Result<ExitCode> {
    let path = a.out.join(CHECKPOINT_FILE);
    let mut ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(cfg) = &a.config {
        ck.config.compressor = load_config(cfg)?.compressor;
    }
    if let Some(seed) = a.seed {
        ck.config.seed = seed;
    }
    ck.config.compress = true;
    ck.config.validate()?;
    let report = runner::compress_checkpoint(&mut ck)?;
    ck.save(&path)?;
    runner::write_json(&a.out.join("compress.json"), &report)?;

    // keep report.json self-consistent when it belongs to this run
    let report_path = a.out.join(REPORT_FILE);
    if let Ok(text) = std::fs::read_to_string(&report_path) {
        let mut run_report: runner::RunReport = serde_json::from_str(&text)?;
        run_report.compression = Some(report.clone());
        run_report.config.compress = true;
        run_report.config.compressor = ck.config.compressor.clone();
        runner::write_json(&report_path, &run_report)?;
        runner::emit_plot_data(&run_report, &a.out)?;
    }
    print_json(&report.metrics)?;
    Ok(ExitCode::SUCCESS)
}

fn grad(a: GradArgs) -> Result<ExitCode> {
    let reports = gradcheck::gradient_suite(a.instances, a.seed)?;
    let mut ok = true;
    println!("{:<22} {:>9} {:>12} {:>8}", "component", "instances", "max rel err", "status");
    for r in &reports {
        let pass = r.passes(a.tol);
        ok &= pass;
        println!(
            "{:<22} {:>9} {:>12.3e} {:>8}",
            r.component,
            r.instances,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        runner::write_json(&dir.join("gradcheck.json"), &reports)?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let (spec, seed) = match &a.config {
        Some(path) => {
            let cfg = load_config(path)?;
            match cfg.dataset {
                DatasetSource::Synthetic(spec) => (spec, cfg.seed),
                DatasetSource::File { .. } => bail!("config {} names a file dataset", path.display()),
            }
        }
        None => (
            SynthSpec {
                classes: a.classes,
                per_class: a.per_class,
                dim: a.dim,
                sep: a.sep,
                warp: a.warp,
            },
            a.seed,
        ),
    };
    // same draws as a training run with this spec and seed
    let ds = runner::load_dataset(&DatasetSource::Synthetic(spec), seed)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("features.{}", a.format));
    save_features(&ds, &path, a.format)?;
    println!("wrote {} ({} samples, {} classes, dim {})", path.display(), ds.len(), ds.class_count(), ds.dim());
    Ok(ExitCode::SUCCESS)
}
