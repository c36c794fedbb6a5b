//! `tokex` — command-line front end for the token-growth training pipeline.
//!
//! Subcommands:
//!
//! * `train`   — run a full training job from a TOML run file
//! * `oracle`  — compare the pipeline against brute force on random instances
//! * `flops`   — print the analytic training-cost table of a schedule
//! * `inspect` — describe an artifact (checkpoint, token set, metrics, run file)
//!
//! Exit codes: 0 on success, 1 on any runtime failure (including oracle
//! mismatches), 2 on command-line usage errors.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tokex_core::config::RunConfig;
use tokex_core::flops::{self, FlopsReport};
use tokex_core::oracle::{self, OracleLimits};
use tokex_core::pipeline::TieBreak;
use tokex_core::schedule::GrowthSchedule;
use tokex_core::tokens::TokenSet;
use tokex_core::trainer::{self, MetricRecord, RunMetrics};
use tokex_core::vit::{ModelConfig, TinyVit};

#[derive(Parser)]
#[command(name = "tokex", version, about = "Token-growth training pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a TOML run file
    Train(TrainArgs),
    /// Check the pipeline against brute-force recomputation on random instances
    Oracle(OracleArgs),
    /// Print the analytic training-cost table for a model and schedule
    Flops(FlopsArgs),
    /// Describe an artifact: checkpoint, token set, metrics stream, or run file
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run file; omitted, the built-in desk-scale defaults apply
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where to write metrics, checkpoints, and the log (overrides the run file)
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override train.total_iterations
    #[arg(long)]
    iterations: Option<usize>,
    /// Override train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Print the fully resolved configuration and exit without training
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct OracleArgs {
    /// Number of random instances to check
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 2026)]
    seed: u64,
    /// Largest token count to generate
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    /// Largest feature dimension to generate
    #[arg(long, default_value_t = 16)]
    max_dim: usize,
    /// Run the production path with a deliberately reversed tie-break; the
    /// suite must then report mismatches (a self-test of its sensitivity)
    #[arg(long, hide = true)]
    corrupt_tie_break: bool,
    /// Emit the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FlopsArgs {
    /// Preset geometry: deit-tiny, deit-small, deit-base, or lvvit-s
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Take the geometry and schedule from a run file instead
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the first-stage kept rate
    #[arg(long)]
    first_stage_rate: Option<f64>,
    /// Override the number of schedule stages
    #[arg(long)]
    num_stages: Option<usize>,
    /// Override the number of expansion rounds per stage
    #[arg(long)]
    repetition_steps: Option<usize>,
    /// Emit the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// A checkpoint, token-set file, metrics stream, run file, or run directory
    path: PathBuf,
    /// Emit the description as JSON
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    // Die quietly when the read end of a pipe closes early, as in
    // `tokex inspect run | head`, instead of panicking on the write.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Oracle(args) => run_oracle(args),
        Command::Flops(args) => run_flops(args),
        Command::Inspect(args) => run_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(output) = &args.output {
        config.output_dir = Some(output.clone());
    }
    if let Some(iterations) = args.iterations {
        config.train.total_iterations = iterations;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    if args.print_config {
        print!("{}", config.effective_toml());
        return Ok(());
    }

    let model_config = config.model_config()?;
    let (train_data, eval_data) = config.load_datasets()?;
    println!(
        "training on {} samples, evaluating on {} ({} classes, {} tokens)",
        train_data.len(),
        eval_data.len(),
        train_data.num_classes,
        model_config.num_tokens(),
    );
    let mut model = TinyVit::new(model_config, config.model.seed)?;
    let outcome = trainer::train(
        &mut model,
        &config.train_config(),
        &train_data,
        &eval_data,
        config.output_dir.as_deref(),
    )?;

    for record in &outcome.metrics.records {
        if let MetricRecord::Eval { iteration, accuracy, .. } = record {
            println!("iteration {iteration}: eval accuracy {accuracy:.4}");
        }
    }
    println!("final accuracy: {:.4}", outcome.final_accuracy);
    println!(
        "training cost: {:.4e} MACs (full-token {:.4e}, ratio {:.4})",
        outcome.total_training_flops,
        outcome.full_token_training_flops,
        outcome.full_token_training_flops / outcome.total_training_flops,
    );
    if let Some(dir) = &config.output_dir {
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

fn run_oracle(args: OracleArgs) -> Result<()> {
    if args.instances == 0 {
        bail!("--instances must be positive");
    }
    let limits = OracleLimits { max_tokens: args.max_tokens, max_dim: args.max_dim };
    let tie_break =
        if args.corrupt_tie_break { TieBreak::HighestIndex } else { TieBreak::LowestIndex };
    let report = oracle::run_suite(args.instances, args.seed, &limits, tie_break)?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for m in report.mismatches.iter().take(5) {
            println!(
                "instance {} (tokens {}, dim {}, {}): {}",
                m.index,
                m.num_tokens,
                m.dim,
                m.metric.name(),
                m.detail
            );
        }
        if report.all_match() {
            println!(
                "checked {} instances (tokens <= {}, dim <= {}): all match brute force",
                report.instances, args.max_tokens, args.max_dim
            );
        }
    }
    if !report.all_match() {
        bail!(
            "{} of {} instances disagree with brute force",
            report.mismatches.len(),
            report.instances
        );
    }
    Ok(())
}

fn flops_model(args: &FlopsArgs) -> Result<ModelConfig> {
    let mut config = match (&args.preset, &args.config) {
        (Some(name), None) => flops::preset(name)
            .ok_or_else(|| anyhow!("unknown preset {name:?}; try deit-tiny, deit-small, deit-base, lvvit-s"))?,
        (None, Some(path)) => RunConfig::from_path(path)?.model_config()?,
        (None, None) => flops::preset("deit-tiny").expect("built-in preset"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let pipeline = config
        .pipeline
        .as_mut()
        .ok_or_else(|| anyhow!("the cost table needs the pipeline enabled"))?;
    if args.first_stage_rate.is_some()
        || args.num_stages.is_some()
        || args.repetition_steps.is_some()
    {
        pipeline.schedule = GrowthSchedule::new(
            args.num_stages.unwrap_or(pipeline.schedule.num_stages()),
            args.first_stage_rate.unwrap_or(pipeline.schedule.first_stage_rate()),
            args.repetition_steps.unwrap_or(pipeline.schedule.repetition_steps()),
        )?;
    }
    Ok(config)
}

fn run_flops(args: FlopsArgs) -> Result<()> {
    let config = flops_model(&args)?;
    let report = flops::schedule_report(&config)?;
    if args.json {
        let value = serde_json::json!({
            "num_tokens": config.num_tokens(),
            "dim": config.dim,
            "depth": config.depth,
            "report": &report,
        });
        println!("{}", serde_json::to_string_pretty(&value)?);
        return Ok(());
    }
    print_flops_table(&config, &report);
    Ok(())
}

fn print_flops_table(config: &ModelConfig, report: &FlopsReport) {
    let mmacs = 1e6;
    println!(
        "{} tokens, dim {}, depth {}, heads {}",
        config.num_tokens(),
        config.dim,
        config.depth,
        config.heads
    );
    println!("stage  kept  forward MMACs  backward MMACs  overhead MMACs");
    for s in &report.stages {
        println!(
            "{:>5}  {:>4}  {:>13.2}  {:>14.2}  {:>14.4}",
            s.stage,
            s.kept_tokens,
            s.forward / mmacs,
            s.backward / mmacs,
            s.selection_overhead / mmacs
        );
    }
    println!("full-token forward: {:.2} MMACs per sample", report.full.forward / mmacs);
    println!("average forward:    {:.2} MMACs per sample", report.average.forward / mmacs);
    println!("speedup (parameterized layers): {:.4}", report.speedup);
    println!("speedup (incl. attention matmuls): {:.4}", report.speedup_with_attention);
    println!("selection overhead: {:.4}% of average cost", 100.0 * report.overhead_fraction);
}

fn magic_of(path: &Path) -> Result<Option<[u8; 8]>> {
    let mut file = std::fs::File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut buf = [0u8; 8];
    match file.read_exact(&mut buf) {
        Ok(()) => Ok(Some(buf)),
        Err(_) => Ok(None), // shorter than 8 bytes: not a binary artifact
    }
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let path = if args.path.is_dir() {
        let metrics = args.path.join("metrics.jsonl");
        if !metrics.exists() {
            bail!("{} is a directory without a metrics.jsonl", args.path.display());
        }
        metrics
    } else {
        args.path.clone()
    };

    let value = match magic_of(&path)? {
        Some(magic) if &magic == b"TOKSET01" => inspect_token_set(&path)?,
        Some(magic) if &magic == b"TVITCKP1" => inspect_checkpoint(&path)?,
        _ => inspect_text(&path)?,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        print_value(&value, 0);
    }
    Ok(())
}

fn inspect_token_set(path: &Path) -> Result<serde_json::Value> {
    let tokens = TokenSet::load(path)?;
    let mut min_norm = f64::INFINITY;
    let mut max_norm = 0.0f64;
    for i in 1..=tokens.num_tokens() {
        let norm = tokens.row(i)?.iter().map(|v| v * v).sum::<f64>().sqrt();
        min_norm = min_norm.min(norm);
        max_norm = max_norm.max(norm);
    }
    Ok(serde_json::json!({
        "artifact": "token set",
        "path": path.display().to_string(),
        "num_tokens": tokens.num_tokens(),
        "dim": tokens.dim(),
        "min_row_norm": min_norm,
        "max_row_norm": max_norm,
    }))
}

fn inspect_checkpoint(path: &Path) -> Result<serde_json::Value> {
    let model = TinyVit::load(path)?;
    let config = model.config();
    let total: usize = model.params().iter().map(|p| p.value.len()).sum();
    let pipeline = match &config.pipeline {
        Some(pipeline) => serde_json::json!({
            "num_stages": pipeline.schedule.num_stages(),
            "first_stage_rate": pipeline.schedule.first_stage_rate(),
            "repetition_steps": pipeline.schedule.repetition_steps(),
            "metric": pipeline.metric.name(),
            "apply_after_block": pipeline.apply_after_block,
        }),
        None => serde_json::Value::String("disabled".into()),
    };
    Ok(serde_json::json!({
        "artifact": "checkpoint",
        "path": path.display().to_string(),
        "image_size": config.image_size,
        "patch_size": config.patch_size,
        "channels": config.channels,
        "depth": config.depth,
        "dim": config.dim,
        "heads": config.heads,
        "num_classes": config.num_classes,
        "num_tokens": config.num_tokens(),
        "parameter_tensors": model.params().len(),
        "parameter_scalars": total,
        "pipeline": pipeline,
    }))
}

fn inspect_text(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    if let Ok(metrics) = RunMetrics::from_jsonl(&text) {
        if !metrics.records.is_empty() {
            return Ok(describe_metrics(path, &metrics));
        }
    }
    if let Ok(config) = RunConfig::from_toml_str(&text) {
        return Ok(serde_json::json!({
            "artifact": "run file",
            "path": path.display().to_string(),
            "effective": config.effective_toml(),
        }));
    }
    bail!("{} is not a recognized artifact", path.display())
}

fn describe_metrics(path: &Path, metrics: &RunMetrics) -> serde_json::Value {
    let iterations = metrics.iterations().count();
    let evals = metrics
        .records
        .iter()
        .filter(|r| matches!(r, MetricRecord::Eval { .. }))
        .count();
    let mut value = serde_json::json!({
        "artifact": "metrics stream",
        "path": path.display().to_string(),
        "iteration_records": iterations,
        "eval_records": evals,
    });
    if let Some(MetricRecord::Summary {
        final_accuracy,
        total_training_flops,
        full_token_training_flops,
        flops_ratio,
        ..
    }) = metrics.records.iter().rev().find(|r| matches!(r, MetricRecord::Summary { .. }))
    {
        value["final_accuracy"] = (*final_accuracy).into();
        value["total_training_flops"] = (*total_training_flops).into();
        value["full_token_training_flops"] = (*full_token_training_flops).into();
        value["flops_ratio"] = (*flops_ratio).into();
    }
    value
}

fn print_value(value: &serde_json::Value, indent: usize) {
    match value {
        serde_json::Value::Object(map) => {
            for (key, inner) in map {
                match inner {
                    serde_json::Value::Object(_) => {
                        println!("{:indent$}{key}:", "");
                        print_value(inner, indent + 2);
                    }
                    serde_json::Value::String(s) if s.contains('\n') => {
                        println!("{:indent$}{key}: |", "");
                        for line in s.lines() {
                            println!("{:width$}{line}", "", width = indent + 2);
                        }
                    }
                    _ => println!("{:indent$}{key}: {inner}", ""),
                }
            }
        }
        other => println!("{:indent$}{other}", ""),
    }
}
