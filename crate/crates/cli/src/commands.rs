use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tinydt::checkpoint;
use tinydt::compress::{run_pipeline, CompressionPlan, Strategy, PLAN_GRAMMAR};
use tinydt::dt::{train_with, DtConfig};
use tinydt::env::{collect_demonstrations, EnvConfig};
use tinydt::eval::{
    emit_report, evaluate, read_raw_csv, summarize, write_summary_json, ReportEntry, SummaryRow, DEFAULT_EPISODES,
    EVAL_SEED_OFFSET,
};
use tinydt::trajectory::{load_dataset, save_dataset};

use crate::manifest::Run;

/// Directory holding default data and model paths.
pub const DATA_DIR_VAR: &str = "TINYDT_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "data";
const DEMOS_FILE: &str = "demos.jsonl";
const MODEL_FILE: &str = "model.dtck";

/// A command-line misuse detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn or_data_dir(path: Option<PathBuf>, file: &str) -> PathBuf {
    path.unwrap_or_else(|| data_dir().join(file))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Decision-transformer gait imitation: data, training, compression and
/// evaluation.
#[derive(Debug, Parser)]
#[command(name = "tinydt", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect expert demonstrations into a JSONL dataset.
    GenData(GenData),
    /// Train a decision transformer on a dataset.
    Train(Train),
    /// Apply a compression strategy to a checkpoint.
    Compress(Compress),
    /// Evaluate a checkpoint on seeded episodes.
    Eval(Eval),
    /// Merge evaluation CSVs into one summary JSON.
    Report(Report),
}

#[derive(Debug, Args)]
struct GenData {
    /// Number of environments (episodes).
    #[arg(long, default_value_t = 1500, value_parser = clap::value_parser!(u64).range(1..))]
    envs: u64,
    /// Steps per episode.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL [default: $TINYDT_DATA_DIR/demos.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Train {
    /// Dataset JSONL [default: $TINYDT_DATA_DIR/demos.jsonl].
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DtConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint [default: $TINYDT_DATA_DIR/model.dtck].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Compress {
    #[arg(long)]
    ckpt: PathBuf,
    /// One of: fp32, q<b>, p, q<b>+p, p+q<b>, p+ft+q<b>.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    /// Dataset for fine-tuning (required by p+ft+q<b>).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of each eligible weight matrix pruned by magnitude.
    #[arg(long, default_value_t = CompressionPlan::DEFAULT_P_U)]
    p_u: f64,
    /// Fraction of feed-forward hidden units removed per block.
    #[arg(long, default_value_t = CompressionPlan::DEFAULT_P_S)]
    p_s: f64,
    /// Seed for fine-tuning batches.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::from_str(s).map_err(|_| format!("unknown strategy {s:?}; expected {PLAN_GRAMMAR}"))
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Auto,
    Value(f32),
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    if s == "auto" {
        return Ok(Target::Auto);
    }
    match s.parse::<f32>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(Target::Value(v)),
        _ => Err(format!("expected `auto` or a non-negative number, got {s:?}")),
    }
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPISODES as u64, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: u64,
    /// Episode i runs on env seed 1000000 + seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Conditioning return; `auto` uses the best training return stored in
    /// the checkpoint.
    #[arg(long, default_value = "auto", value_parser = parse_target)]
    target_return: Target,
    /// Raw per-episode CSV; the summary JSON goes next to it with a `.json`
    /// extension.
    #[arg(long)]
    csv: PathBuf,
}

#[derive(Debug, Args)]
struct Report {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Compress(a) => compress(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let run = Run::start("gen-data");
    let out = or_data_dir(a.out, DEMOS_FILE);
    let env = EnvConfig { horizon: a.steps as usize, ..EnvConfig::default() };
    let demos = collect_demonstrations(a.envs as usize, &env, a.seed)?;
    create_parent(&out)?;
    save_dataset(&demos, &out).with_context(|| format!("writing {}", out.display()))?;
    let returns: Vec<f64> = demos.iter().map(|t| t.total_return as f64).collect();
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("trajectories: {}", demos.len());
    println!("mean total_return: {mean:.4}");
    println!("max total_return: {max:.4}");
    println!("wrote {}", out.display());
    run.finish(
        json!({ "envs": a.envs, "steps": a.steps, "env": serde_json::to_value(&env)? }),
        json!({ "seed": a.seed }),
        &[],
        &[&out],
    )?;
    Ok(())
}

fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

fn train(a: Train) -> Result<()> {
    let run = Run::start("train");
    let data = or_data_dir(a.data, DEMOS_FILE);
    let out = or_data_dir(a.out, MODEL_FILE);
    let dataset = load_dataset(&data).with_context(|| format!("loading {}", data.display()))?;
    let cfg = DtConfig { steps: a.steps, ..DtConfig::default() };
    let every = (a.steps / 20).max(1);
    let (model, losses) = train_with::<f32>(&dataset, &cfg, a.seed, |step, loss| {
        if step % every == 0 {
            eprintln!("step {step}/{}: loss {loss:.6}", a.steps);
        }
    })?;
    create_parent(&out)?;
    let report = checkpoint::save(&model, &out).with_context(|| format!("writing {}", out.display()))?;
    let loss_path = loss_csv_path(&out);
    let mut w = BufWriter::new(File::create(&loss_path).with_context(|| format!("writing {}", loss_path.display()))?);
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()?;
    if let Some(last) = losses.last() {
        println!("final loss: {last}");
    }
    println!("target_return: {}", model.target_return);
    println!("wrote {} ({} bytes)", out.display(), report.total_bytes);
    println!("wrote {}", loss_path.display());
    run.finish(
        json!({ "model": serde_json::to_value(&cfg)? }),
        json!({ "seed": a.seed }),
        &[&data],
        &[&out, &loss_path],
    )?;
    Ok(())
}

fn compress(a: Compress) -> Result<()> {
    let run = Run::start("compress");
    let plan = CompressionPlan { p_u: a.p_u, p_s: a.p_s, ..CompressionPlan::new(a.strategy) };
    plan.validate()?;
    if plan.strategy.fine_tunes() && a.data.is_none() {
        return Err(UsageError(format!("strategy {} fine-tunes and needs --data", plan.strategy)).into());
    }
    let model = checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let dataset = match (&a.data, plan.strategy.fine_tunes()) {
        (Some(p), true) => Some(load_dataset(p).with_context(|| format!("loading {}", p.display()))?),
        _ => None,
    };
    let out_model = run_pipeline(&model, &plan, dataset.as_deref(), a.seed)?;
    create_parent(&a.out)?;
    let report = checkpoint::save(&out_model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("strategy: {}", plan.strategy);
    println!("{:<28} {:<16} {:>10}", "tensor", "encoding", "bytes");
    for t in &report.tensors {
        println!("{:<28} {:<16} {:>10}", t.name, t.encoding.to_string(), t.entry_bytes);
    }
    println!("header bytes: {}", report.header_bytes);
    println!("file bytes: {}", report.total_bytes);
    println!("baseline bytes: {}", report.baseline_bytes);
    println!("reduction: {:.2}%", report.reduction_pct());
    let mut inputs: Vec<&Path> = vec![&a.ckpt];
    if let (Some(d), true) = (&a.data, plan.strategy.fine_tunes()) {
        inputs.push(d);
    }
    run.finish(
        json!({
            "strategy": plan.strategy.to_string(),
            "p_u": plan.p_u,
            "p_s": plan.p_s,
            "ft_fraction": plan.ft_fraction,
            "file_bytes": report.total_bytes,
            "baseline_bytes": report.baseline_bytes,
            "reduction_pct": report.reduction_pct(),
        }),
        json!({ "seed": a.seed }),
        &inputs,
        &[&a.out],
    )?;
    Ok(())
}

fn strategy_label(model: &tinydt::DtModel) -> String {
    if model.compression.label.is_empty() {
        Strategy::Fp32.to_string()
    } else {
        model.compression.label.clone()
    }
}

fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn eval(a: Eval) -> Result<()> {
    let run = Run::start("eval");
    let bytes = fs::read(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let model = checkpoint::decode(&bytes).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let target = match a.target_return {
        Target::Auto => model.target_return,
        Target::Value(v) => v,
    };
    let env = EnvConfig::default();
    let evaluation = evaluate(&model, &env, a.episodes as usize, a.seed, target)?;
    let baseline = checkpoint::baseline_bytes(&model)?;
    let file_bytes = bytes.len() as u64;
    let reduction = 100.0 * (1.0 - file_bytes as f64 / baseline as f64);
    let label = strategy_label(&model);
    let entry = ReportEntry { strategy: label.clone(), evaluation, size: Some((file_bytes, reduction)) };
    let stats = entry.evaluation.stats()?;
    let json_path = summary_path(&a.csv);
    create_parent(&a.csv)?;
    emit_report(std::slice::from_ref(&entry), &a.csv, &json_path)?;
    println!("strategy: {label}");
    println!("episodes: {}", stats.n);
    println!("target_return: {target}");
    println!("mean: {:.4}  median: {:.4}  q1: {:.4}  q3: {:.4}", stats.mean, stats.median, stats.q1, stats.q3);
    println!("outliers: {}", stats.outliers.len());
    println!("wrote {}", a.csv.display());
    println!("wrote {}", json_path.display());
    run.finish(
        json!({
            "episodes": a.episodes,
            "target_return": target,
            "env": serde_json::to_value(&env)?,
        }),
        json!({ "seed": a.seed, "first_env_seed": EVAL_SEED_OFFSET + a.seed }),
        &[&a.ckpt],
        &[&a.csv, &json_path],
    )?;
    Ok(())
}

/// Sizes recorded in the summary written next to an eval CSV, if any.
fn sidecar_sizes(csv: &Path) -> Result<Vec<SummaryRow>> {
    let path = summary_path(csv);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let rows: Vec<SummaryRow> = serde_json::from_reader(BufReader::new(File::open(&path)?))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(rows)
}

fn report(a: Report) -> Result<()> {
    let run = Run::start("report");
    let mut entries = Vec::new();
    for input in &a.inputs {
        let file = File::open(input).with_context(|| format!("reading {}", input.display()))?;
        let groups = read_raw_csv(BufReader::new(file), input)?;
        let sizes = sidecar_sizes(input)?;
        for (strategy, evaluation) in groups {
            let size = sizes
                .iter()
                .find(|r| r.strategy == strategy)
                .and_then(|r| Some((r.file_bytes?, r.reduction_pct?)));
            entries.push(ReportEntry { strategy, evaluation, size });
        }
    }
    let rows = summarize(&entries)?;
    create_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?);
    write_summary_json(&rows, &mut w)?;
    w.flush()?;
    for r in &rows {
        println!("{:<12} n={:<4} median={:.4} iqr={:.4} outliers={}", r.strategy, r.n, r.median, r.iqr, r.outlier_count);
    }
    println!("wrote {}", a.out.display());
    let inputs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    run.finish(json!({ "strategies": rows.len() }), json!(null), &inputs, &[&a.out])?;
    Ok(())
}
