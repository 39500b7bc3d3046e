//! Experiment families: seed restarts, pretraining-iteration grids,
//! fine-tuning-epoch grids, and attack curves.
//!
//! Seed derivation, documented once: for the random-seed axis each axis value
//! is itself the seed base, so trial seed = value + trial_index. For numeric
//! axes every trial uses seed_base + trial_index, deliberately shared across
//! axis values and across modes — paired trials isolate the effect of the
//! axis (or the architecture) from data order. Run identity is always the
//! triple (mode, axis value, trial index).
//!
//! Trials are independent; they run on a bounded worker pool and results are
//! sorted by trial key before any aggregation, so execution order cannot
//! change a report byte.

use crate::config::{Mode, RunConfig, SweepAxis};
use crate::report::{CurvePoint, ReportPoint, SummaryRow, SweepReport};
use crate::runner::{self, PreparedTask};
use crate::stats::DistributionSummary;
use adapterbench_core::attack::{self, SynonymLexicon};
use adapterbench_core::data::TaskKind;
use adapterbench_core::{Error, Result};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

fn trial_context(mode: Mode, value: u64, trial: usize, seed: u64) -> String {
    format!("trial {}/{value}/t{trial} (seed {seed})", mode.label())
}

/// Dev-metric distributions per mode across seed restarts. Each trial runs
/// the full pipeline (pretraining then fine-tuning).
pub fn sweep_seeds(cfg: &RunConfig, workers: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.axis != SweepAxis::RandomSeed {
        return Err(Error::Usage(format!(
            "sweep-seeds requires axis random_seed, config says {:?}",
            cfg.sweep.axis
        )));
    }
    let task = runner::prepare_data(cfg)?;
    let values = cfg.sweep.values.expand();

    let mut plan = Vec::new();
    for mode in &cfg.sweep.modes {
        for &value in &values {
            for trial in 0..cfg.sweep.trials_per_value {
                plan.push((*mode, value, trial, value + trial as u64));
            }
        }
    }
    let points: Vec<ReportPoint> = pool(workers)?.install(|| {
        plan.par_iter()
            .map(|(mode, value, trial, seed)| {
                let out = runner::run_trial(cfg, &task, *mode, *seed, None, None)
                    .map_err(|e| Error::Training(format!("{}: {e}", trial_context(*mode, *value, *trial, *seed))))?;
                Ok(ReportPoint {
                    mode: mode.label().to_string(),
                    axis_value: *value,
                    trial: *trial,
                    seed: *seed,
                    metrics: out.metrics,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut report = SweepReport::new(
        "seeds",
        "random_seed",
        cfg.primary_metric.name(),
        cfg.sweep.modes.iter().map(|m| m.label().to_string()).collect(),
    );
    report.run_count = points.len();
    report.points = points;
    for mode in &cfg.sweep.modes {
        let values: Vec<f64> = report
            .points
            .iter()
            .filter(|p| p.mode == mode.label())
            .map(|p| p.metrics[cfg.primary_metric.name()])
            .collect();
        report.summaries.push(SummaryRow {
            key: mode.label().to_string(),
            mode: mode.label().to_string(),
            summary: DistributionSummary::from_values(values)?,
        });
    }
    report.sort();
    Ok(report)
}

/// One pretraining run per mode with checkpoints on the iteration grid, then
/// a fixed-budget fine-tune from every checkpoint. Value 0 means fine-tuning
/// the unpretrained model.
pub fn sweep_pretrain_iters(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.axis != SweepAxis::PretrainIterations {
        return Err(Error::Usage(format!(
            "sweep-pretrain requires axis pretrain_iterations, config says {:?}",
            cfg.sweep.axis
        )));
    }
    let task = runner::prepare_data(cfg)?;
    let values = cfg.sweep.values.expand();
    let marks: Vec<usize> = values.iter().map(|v| *v as usize).collect();
    let max_iter = *marks.iter().max().unwrap_or(&0);
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let mut report = SweepReport::new(
        "pretrain_iterations",
        "pretrain_iterations",
        cfg.primary_metric.name(),
        cfg.sweep.modes.iter().map(|m| m.label().to_string()).collect(),
    );

    for mode in &cfg.sweep.modes {
        let run_id = format!("sweep-{}", mode.label());
        runner::run_tsp(
            cfg,
            &task,
            *mode,
            cfg.sweep.seed_base,
            max_iter,
            &marks,
            Some(&ckpt_dir),
            &run_id,
        )?;

        let mut plan = Vec::new();
        for &value in &values {
            let ckpt = runner::checkpoint_path(&ckpt_dir, &run_id, "tsp", value as usize);
            for trial in 0..cfg.sweep.trials_per_value {
                plan.push((value, trial, cfg.sweep.seed_base + trial as u64, ckpt.clone()));
            }
        }
        let mode_points: Vec<ReportPoint> = pool(workers)?.install(|| {
            plan.par_iter()
                .map(|(value, trial, seed, ckpt)| {
                    if !ckpt.exists() {
                        return Err(Error::Training(format!(
                            "{}: checkpoint {} was not emitted",
                            trial_context(*mode, *value, *trial, *seed),
                            ckpt.display()
                        )));
                    }
                    let out = runner::finetune_from_checkpoint(
                        cfg,
                        &task,
                        *mode,
                        ckpt,
                        *seed,
                        cfg.sweep.finetune_epochs_fixed,
                    )
                    .map_err(|e| Error::Training(format!("{}: {e}", trial_context(*mode, *value, *trial, *seed))))?;
                    Ok(ReportPoint {
                        mode: mode.label().to_string(),
                        axis_value: *value,
                        trial: *trial,
                        seed: *seed,
                        metrics: out.metrics,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;

        // curve: mean primary metric per grid point
        for &value in &values {
            let ys: Vec<f64> = mode_points
                .iter()
                .filter(|p| p.axis_value == value)
                .map(|p| p.metrics[cfg.primary_metric.name()])
                .collect();
            report.curves.push(CurvePoint {
                mode: mode.label().to_string(),
                x: value,
                y: ys.iter().sum::<f64>() / ys.len() as f64,
            });
        }
        let all: Vec<f64> = mode_points
            .iter()
            .map(|p| p.metrics[cfg.primary_metric.name()])
            .collect();
        report.summaries.push(SummaryRow {
            key: mode.label().to_string(),
            mode: mode.label().to_string(),
            summary: DistributionSummary::from_values(all)?,
        });
        report.points.extend(mode_points);
    }
    report.run_count = report.points.len();
    report.sort();
    Ok(report)
}

/// Fine-tuning stability: from each declared pretraining checkpoint, sweep
/// the number of fine-tuning epochs and summarize the score distribution per
/// (checkpoint, mode).
pub fn sweep_finetune_epochs(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.axis != SweepAxis::FinetuneEpochs {
        return Err(Error::Usage(format!(
            "sweep-finetune requires axis finetune_epochs, config says {:?}",
            cfg.sweep.axis
        )));
    }
    if cfg.sweep.checkpoints.is_empty() {
        return Err(Error::Config(
            "sweep-finetune needs sweep.checkpoints (pretraining iteration marks)".into(),
        ));
    }
    let task = runner::prepare_data(cfg)?;
    let epoch_values = cfg.sweep.values.expand();
    let marks = cfg.sweep.checkpoints.clone();
    let max_iter = *marks.iter().max().unwrap();
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let mut report = SweepReport::new(
        "finetune_epochs",
        "finetune_epochs",
        cfg.primary_metric.name(),
        cfg.sweep.modes.iter().map(|m| m.label().to_string()).collect(),
    );

    for mode in &cfg.sweep.modes {
        let run_id = format!("sweep-{}", mode.label());
        runner::run_tsp(
            cfg,
            &task,
            *mode,
            cfg.sweep.seed_base,
            max_iter,
            &marks,
            Some(&ckpt_dir),
            &run_id,
        )?;
        for &mark in &marks {
            let ckpt = runner::checkpoint_path(&ckpt_dir, &run_id, "tsp", mark);
            let mut plan = Vec::new();
            for &epochs in &epoch_values {
                for trial in 0..cfg.sweep.trials_per_value {
                    plan.push((epochs, trial, cfg.sweep.seed_base + trial as u64));
                }
            }
            let mut ckpt_points: Vec<ReportPoint> = pool(workers)?.install(|| {
                plan.par_iter()
                    .map(|(epochs, trial, seed)| {
                        let out = runner::finetune_from_checkpoint(
                            cfg,
                            &task,
                            *mode,
                            &ckpt,
                            *seed,
                            *epochs as usize,
                        )
                        .map_err(|e| {
                            Error::Training(format!(
                                "{} at checkpoint {mark}: {e}",
                                trial_context(*mode, *epochs, *trial, *seed)
                            ))
                        })?;
                        Ok(ReportPoint {
                            mode: mode.label().to_string(),
                            axis_value: *epochs,
                            trial: *trial,
                            seed: *seed,
                            metrics: {
                                let mut m = out.metrics;
                                m.insert("checkpoint".to_string(), mark as f64);
                                m
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let values: Vec<f64> = ckpt_points
                .iter()
                .map(|p| p.metrics[cfg.primary_metric.name()])
                .collect();
            report.summaries.push(SummaryRow {
                key: format!("ckpt-{mark}"),
                mode: mode.label().to_string(),
                summary: DistributionSummary::from_values(values)?,
            });
            report.points.append(&mut ckpt_points);
        }
    }
    report.run_count = report.points.len();
    report.sort();
    Ok(report)
}

fn load_or_generate_lexicon(cfg: &RunConfig, task: &PreparedTask) -> Result<SynonymLexicon> {
    if let Some(path) = &cfg.attack.lexicon_path {
        return SynonymLexicon::load_tsv(path);
    }
    let synthetic = task.synthetic.as_ref().ok_or_else(|| {
        Error::Config("attack on TSV data needs attack.lexicon_path".into())
    })?;
    attack::synthetic_lexicon(synthetic, cfg.attack.n_synonyms, cfg.attack.lexicon_seed)
}

/// Attack success rate along the pretraining grid: pretrain with checkpoints,
/// fine-tune each with the fixed budget, then attack the dev subset. Records
/// for every grid point are written as JSON lines next to the report.
pub fn attack_curve(cfg: &RunConfig, out_dir: &Path, workers: usize) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.sweep.axis != SweepAxis::PretrainIterations {
        return Err(Error::Usage(
            "attack curves sweep the pretrain_iterations axis".into(),
        ));
    }
    let task = runner::prepare_data(cfg)?;
    if task.train.task_kind != TaskKind::SingleSentence {
        return Err(Error::Config(
            "the word-substitution attack supports single-sentence tasks".into(),
        ));
    }
    let lexicon = load_or_generate_lexicon(cfg, &task)?;
    let values = cfg.sweep.values.expand();
    let marks: Vec<usize> = values.iter().map(|v| *v as usize).collect();
    let max_iter = *marks.iter().max().unwrap_or(&0);
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let examples: Vec<(String, usize)> = task
        .dev
        .examples
        .iter()
        .take(cfg.attack.n_examples)
        .map(|e| {
            e.label
                .class()
                .map(|c| (e.text.clone(), c))
                .ok_or_else(|| Error::Data("attack needs class labels".into()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = SweepReport::new(
        "attack_curve",
        "pretrain_iterations",
        "attack_success_rate",
        cfg.sweep.modes.iter().map(|m| m.label().to_string()).collect(),
    );

    for mode in &cfg.sweep.modes {
        let run_id = format!("attack-{}", mode.label());
        runner::run_tsp(
            cfg,
            &task,
            *mode,
            cfg.sweep.seed_base,
            max_iter,
            &marks,
            Some(&ckpt_dir),
            &run_id,
        )?;
        let plan: Vec<(u64, PathBuf)> = values
            .iter()
            .map(|v| {
                (
                    *v,
                    runner::checkpoint_path(&ckpt_dir, &run_id, "tsp", *v as usize),
                )
            })
            .collect();
        let outcomes: Vec<(u64, f64, usize, Vec<attack::AttackRecord>)> =
            pool(workers)?.install(|| {
                plan.par_iter()
                    .map(|(value, ckpt)| {
                        let seed = cfg.sweep.seed_base;
                        let out = runner::finetune_from_checkpoint(
                            cfg,
                            &task,
                            *mode,
                            ckpt,
                            seed,
                            cfg.sweep.finetune_epochs_fixed,
                        )
                        .map_err(|e| Error::Training(format!("{}: {e}", trial_context(*mode, *value, 0, seed))))?;
                        let max_len = cfg.phases.for_mode(*mode).finetune.optimizer.max_seq_len;
                        let ctx = attack::AttackContext::new(&out.model, &task.vocab, max_len);
                        let res = attack::attack_success_rate(
                            &ctx,
                            &examples,
                            &lexicon,
                            cfg.attack.max_substitution_frac,
                        )?;
                        Ok((*value, res.rate, res.attempted, res.records))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;

        for (value, rate, attempted, records) in outcomes {
            let records_path = out_dir.join(format!("attack-records-{}-{value}.jsonl", mode.label()));
            attack::write_records(&records_path, &records)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("attack_success_rate".to_string(), rate);
            metrics.insert("attempted".to_string(), attempted as f64);
            report.points.push(ReportPoint {
                mode: mode.label().to_string(),
                axis_value: value,
                trial: 0,
                seed: cfg.sweep.seed_base,
                metrics,
            });
            report.curves.push(CurvePoint {
                mode: mode.label().to_string(),
                x: value,
                y: rate,
            });
        }
        let rates: Vec<f64> = report
            .points
            .iter()
            .filter(|p| p.mode == mode.label())
            .map(|p| p.metrics["attack_success_rate"])
            .collect();
        report.summaries.push(SummaryRow {
            key: mode.label().to_string(),
            mode: mode.label().to_string(),
            summary: DistributionSummary::from_values(rates)?,
        });
    }
    report.run_count = report.points.len();
    report.sort();
    Ok(report)
}
