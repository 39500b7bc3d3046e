//! `adapterbench` command line: single runs, sweeps, attacks, and report
//! re-emission. Run configuration comes from one JSON file; any field can be
//! overridden with `--path.to.field=value`.

use adapterbench_core::model::Model;
use adapterbench_core::train::{self, EvalData};
use adapterbench_core::{Error, Result};
use adapterbench_harness::config::{Mode, RunConfig};
use adapterbench_harness::report::{self, ReportFormat};
use adapterbench_harness::stats::DistributionSummary;
use adapterbench_harness::{runner, sweeps};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "adapterbench",
    about = "Adapter-based two-phase training experiments: seed sweeps, iteration sweeps, and word-substitution attacks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration JSON file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the base seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports, logs, and checkpoints.
    #[arg(long, global = true, default_value = "abench-out")]
    out_dir: PathBuf,

    /// Worker threads for independent trials (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Task-specific pretraining for one mode; writes a checkpoint and log.
    Pretrain {
        #[arg(long, default_value = "with_adapter")]
        mode: String,
    },
    /// Supervised fine-tuning (optionally from a pretraining checkpoint).
    Finetune {
        #[arg(long, default_value = "with_adapter")]
        mode: String,
        /// Checkpoint to start from; a fresh model when absent.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpointed model on the dev split.
    Eval {
        #[arg(long)]
        from: PathBuf,
    },
    /// Dev-metric distributions across seed restarts.
    SweepSeeds,
    /// Metric vs. number of pretraining iterations (fixed fine-tune budget).
    SweepPretrain,
    /// Metric distributions across fine-tuning epochs per checkpoint.
    SweepFinetune,
    /// Word-substitution attack success rate along the pretraining grid.
    Attack,
    /// Validate a report file and re-emit it in another format.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

/// Flags clap owns; any other `--key=value` is a config override.
const KNOWN_FLAGS: [&str; 8] = [
    "config", "seed", "out-dir", "workers", "mode", "from", "input", "format",
];

fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut cli_args = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some(rest) = arg.strip_prefix("--") {
            if let Some((key, value)) = rest.split_once('=') {
                if !KNOWN_FLAGS.contains(&key) {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        cli_args.push(arg);
    }
    (cli_args, overrides)
}

fn parse_mode(s: &str) -> Result<Mode> {
    match s {
        "with_adapter" | "w" => Ok(Mode::WithAdapter),
        "without_adapter" | "wo" => Ok(Mode::WithoutAdapter),
        other => Err(Error::Usage(format!(
            "unknown mode '{other}' (expected with_adapter or without_adapter)"
        ))),
    }
}

fn load_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("this subcommand needs --config <file.json>".into()))?;
    let mut cfg = RunConfig::load_with_overrides(path, overrides)?;
    if let Some(seed) = cli.seed {
        cfg.sweep.seed_base = seed;
    }
    Ok(cfg)
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Config(_) => "config",
        Error::Data(_) => "data",
        Error::Usage(_) => "usage",
        Error::Training(_) => "training",
        Error::Schema(_) => "schema",
        Error::Io(_) => "io",
        Error::Json(_) => "serialization",
    }
}

fn main() {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(&cli, &overrides) {
        Ok(output) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&output).expect("serializable output")
            );
        }
        Err(e) => {
            let record = serde_json::json!({
                "error": { "kind": error_kind(&e), "message": e.to_string() }
            });
            eprintln!("{record}");
            std::process::exit(1);
        }
    }
}

fn run(cli: &Cli, overrides: &[(String, String)]) -> Result<serde_json::Value> {
    let workers = cli.workers.unwrap_or_else(num_workers);
    match &cli.command {
        Command::Pretrain { mode } => {
            let cfg = load_config(cli, overrides)?;
            let mode = parse_mode(mode)?;
            let task = runner::prepare_data(&cfg)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let iterations = cfg.phases.for_mode(mode).tsp.iterations;
            let run_id = format!("cli-{}", mode.label());
            let (_, log) = runner::run_tsp(
                &cfg,
                &task,
                mode,
                cfg.sweep.seed_base,
                iterations,
                &[iterations],
                Some(&cli.out_dir),
                &run_id,
            )?;
            let log_path = cli.out_dir.join(format!("pretrain-{}.jsonl", mode.label()));
            log.write_jsonl(&log_path)?;
            Ok(serde_json::json!({
                "mode": mode.label(),
                "iterations": log.iterations_run,
                "final_loss": log.records.last().map(|r| r.loss),
                "checkpoints": log.checkpoints.iter().map(|(i, p)| {
                    serde_json::json!({"iteration": i, "path": p})
                }).collect::<Vec<_>>(),
                "log": log_path,
            }))
        }
        Command::Finetune { mode, from } => {
            let cfg = load_config(cli, overrides)?;
            let mode = parse_mode(mode)?;
            let task = runner::prepare_data(&cfg)?;
            std::fs::create_dir_all(&cli.out_dir)?;
            let epochs = cfg.phases.for_mode(mode).finetune.epochs;
            let seed = cfg.sweep.seed_base;
            let mut model = match from {
                Some(p) => Model::load_checkpoint(p)?,
                None => adapterbench_core::model::build_model(&cfg.model_for(mode), seed)?,
            };
            let (metrics, log) =
                runner::finetune_and_eval(&cfg, &task, mode, &mut model, seed, epochs)?;
            let ckpt = cli.out_dir.join(format!("cli-{}-ft-final.ckpt", mode.label()));
            model.save_checkpoint(&ckpt)?;
            let log_path = cli.out_dir.join(format!("finetune-{}.jsonl", mode.label()));
            log.write_jsonl(&log_path)?;
            Ok(serde_json::json!({
                "mode": mode.label(),
                "epochs": epochs,
                "metrics": metrics,
                "checkpoint": ckpt,
                "log": log_path,
            }))
        }
        Command::Eval { from } => {
            let cfg = load_config(cli, overrides)?;
            let task = runner::prepare_data(&cfg)?;
            let model = Model::load_checkpoint(from)?;
            let mode = if model.config.adapter.is_some() {
                Mode::WithAdapter
            } else {
                Mode::WithoutAdapter
            };
            let max_len = cfg.phases.for_mode(mode).finetune.optimizer.max_seq_len;
            let eval = EvalData::from_dataset(&task.dev, &task.vocab, max_len)?;
            let metrics = train::evaluate(&model, &eval, &cfg.metrics, cfg.eval_batch_size)?;
            Ok(serde_json::json!({ "checkpoint": from, "metrics": metrics }))
        }
        Command::SweepSeeds => {
            let cfg = load_config(cli, overrides)?;
            let rep = sweeps::sweep_seeds(&cfg, workers)?;
            let files =
                report::emit_report(&rep, &cli.out_dir, &[ReportFormat::Json, ReportFormat::Csv])?;
            Ok(summary_json(&rep, &files))
        }
        Command::SweepPretrain => {
            let cfg = load_config(cli, overrides)?;
            let rep = sweeps::sweep_pretrain_iters(&cfg, &cli.out_dir, workers)?;
            let files =
                report::emit_report(&rep, &cli.out_dir, &[ReportFormat::Json, ReportFormat::Csv])?;
            Ok(summary_json(&rep, &files))
        }
        Command::SweepFinetune => {
            let cfg = load_config(cli, overrides)?;
            let rep = sweeps::sweep_finetune_epochs(&cfg, &cli.out_dir, workers)?;
            let files =
                report::emit_report(&rep, &cli.out_dir, &[ReportFormat::Json, ReportFormat::Csv])?;
            Ok(summary_json(&rep, &files))
        }
        Command::Attack => {
            let cfg = load_config(cli, overrides)?;
            let rep = sweeps::attack_curve(&cfg, &cli.out_dir, workers)?;
            let files =
                report::emit_report(&rep, &cli.out_dir, &[ReportFormat::Json, ReportFormat::Csv])?;
            Ok(summary_json(&rep, &files))
        }
        Command::Report { input, format } => {
            let rep = report::SweepReport::load(input)?;
            let loaded: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(input)?)?;
            report::validate_schema(&report::report_schema(), &loaded)?;
            // integrity: every summary must be recomputable from its raw values
            for row in &rep.summaries {
                let rebuilt = DistributionSummary::from_values(row.summary.values.clone())?;
                if rebuilt != row.summary {
                    return Err(Error::Data(format!(
                        "summary '{}' does not match its raw values",
                        row.key
                    )));
                }
            }
            let formats = match format.as_str() {
                "json" => vec![ReportFormat::Json],
                "csv" => vec![ReportFormat::Csv],
                "both" => vec![ReportFormat::Json, ReportFormat::Csv],
                other => {
                    return Err(Error::Usage(format!(
                        "unknown format '{other}' (json, csv, both)"
                    )))
                }
            };
            let files = report::emit_report(&rep, &cli.out_dir, &formats)?;
            Ok(summary_json(&rep, &files))
        }
    }
}

fn summary_json(rep: &report::SweepReport, files: &[PathBuf]) -> serde_json::Value {
    serde_json::json!({
        "sweep_kind": rep.sweep_kind,
        "run_count": rep.run_count,
        "summaries": rep.summaries.iter().map(|s| serde_json::json!({
            "key": s.key, "mode": s.mode,
            "mean": s.summary.mean, "std": s.summary.std,
            "min": s.summary.min, "median": s.summary.median, "max": s.summary.max,
        })).collect::<Vec<_>>(),
        "files": files,
    })
}

fn num_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
