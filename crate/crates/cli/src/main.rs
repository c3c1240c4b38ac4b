//! Command-line front end: quantize, evaluate, dump statistics, ablate.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hptq::ir::{load_dataset, load_model, save_quantized};
use hptq::pipeline::{ablation_suites, render_ablation, run_ablation};
use hptq::stats::collect_statistics;
use hptq::{evaluate, CalibrationSet, ErrorMeasure, PipelineConfig, Toggles};

#[derive(Parser)]
#[command(name = "hptq", version, about = "Hardware-friendly post-training quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a float model with a calibration set.
    Quantize(QuantizeArgs),
    /// Compare a float and a quantized model on a labeled dataset.
    Eval(EvalArgs),
    /// Write per-channel activation statistics as CSV.
    Stats(StatsArgs),
    /// Run the toggle matrix and print a comparison table.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = 8)]
    bits: u32,
    /// Threshold error measure.
    #[arg(long, default_value = "mse", value_parser = parse_measure)]
    error: ErrorMeasure,
    #[arg(long, default_value_t = 24.0)]
    z_threshold: f64,
    #[arg(long, default_value_t = 0.25)]
    snc_alpha: f64,
    /// Threshold halvings examined by the search.
    #[arg(long, default_value_t = 10)]
    iterations: u32,
    #[arg(long, default_value_t = 2048)]
    bins: usize,
    /// Comma-separated stages to switch off.
    #[arg(long, value_delimiter = ',', value_parser = parse_stage)]
    disable: Vec<String>,
}

impl PipelineArgs {
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut toggles = Toggles::default();
        for stage in &self.disable {
            toggles.set(stage, false)?;
        }
        let cfg = PipelineConfig {
            bits: self.bits,
            measure: self.error,
            z_threshold: self.z_threshold,
            snc_alpha: self.snc_alpha,
            iterations: self.iterations,
            bins: self.bins,
            toggles,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Where to write the JSON report (the text rendering goes to stderr).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    float: PathBuf,
    #[arg(long)]
    quant: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Labels: a dataset directory, or a file of integers separated by
    /// whitespace or commas. Defaults to the labels stored with `--data`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2048)]
    bins: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Calibration dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Labeled evaluation dataset; defaults to `--data`.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_measure(s: &str) -> Result<ErrorMeasure, String> {
    s.parse().map_err(|e: hptq::Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<String, String> {
    Toggles::default().set(s, false).map_err(|e| e.to_string())?;
    Ok(s.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn model(path: &Path) -> anyhow::Result<hptq::Graph> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn dataset(path: &Path) -> anyhow::Result<CalibrationSet> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn quantize(a: QuantizeArgs) -> anyhow::Result<()> {
    let cfg = a.pipeline.config()?;
    let g = model(&a.model)?;
    let d = dataset(&a.data)?;
    let (q, report) = hptq::quantize_pipeline(&g, &d, &cfg)?;
    save_quantized(&q, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    eprint!("{}", report.render_text());
    log::info!("quantized model written to {}", a.out.display());
    Ok(())
}

fn read_labels(path: &Path) -> anyhow::Result<Vec<u32>> {
    if path.is_dir() {
        return dataset(path)?
            .labels
            .with_context(|| format!("{} carries no labels", path.display()));
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().with_context(|| format!("bad label `{t}`")))
        .collect()
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let f = model(&a.float)?;
    let q = model(&a.quant)?;
    if !q.is_quantized() {
        bail!("{} is not a quantized model", a.quant.display());
    }
    let mut d = dataset(&a.data)?;
    if let Some(path) = &a.labels {
        d.labels = Some(read_labels(path)?);
    }
    let report = evaluate(&f, &q, &d)?;
    print!("{}", report.render_text());
    if let Some(path) = &a.json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn stats(a: StatsArgs) -> anyhow::Result<()> {
    let g = model(&a.model)?;
    let d = dataset(&a.data)?;
    let store = collect_statistics(&g, &d, a.bins)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    store.write_csv(BufWriter::new(file))?;
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = a.pipeline.config()?;
    let g = model(&a.model)?;
    let calib = dataset(&a.data)?;
    let eval_set = match &a.eval {
        Some(p) => dataset(p)?,
        None => calib.clone(),
    };
    let results = run_ablation(&g, &calib, &eval_set, &ablation_suites(&base))?;
    print!("{}", render_ablation(&results));
    if let Some(path) = &a.json {
        std::fs::write(path, serde_json::to_string_pretty(&results)?)?;
    }
    Ok(())
}
