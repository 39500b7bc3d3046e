//! Single-trial execution: prepare data once, then run task-specific
//! pretraining and fine-tuning for one (mode, seed) pair.

use crate::config::{Mode, RunConfig};
use adapterbench_core::data::{
    self, generate_synthetic, LabeledDataset, SyntheticTask, Vocab,
};
use adapterbench_core::model::Model;
use adapterbench_core::train::{
    self, EvalData, Objective, PhaseData, PhaseKind, RunOptions, Schedule, TrainLog, TrainPhase,
};
use adapterbench_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Data loaded once and shared read-only by every trial.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub vocab: Vocab,
    pub train: LabeledDataset,
    pub dev: LabeledDataset,
    pub pretrain_corpus: Vec<String>,
    /// Present for synthetic tasks; carries the rule oracle and drives
    /// lexicon generation.
    pub synthetic: Option<SyntheticTask>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedTask> {
    cfg.data.validate()?;
    if let Some(spec) = &cfg.data.synthetic {
        let task = generate_synthetic(spec)?;
        if task.vocab.len() != cfg.model.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size ({}) must equal the synthetic vocabulary size ({})",
                cfg.model.vocab_size,
                task.vocab.len()
            )));
        }
        return Ok(PreparedTask {
            vocab: task.vocab.clone(),
            train: task.train.clone(),
            dev: task.dev.clone(),
            pretrain_corpus: task.pretrain_corpus.clone(),
            synthetic: Some(task),
        });
    }
    let tsv = cfg.data.tsv.as_ref().expect("validated");
    let train = data::load_tsv(&tsv.train_path, &tsv.schema)?;
    let dev = data::load_tsv(&tsv.dev_path, &tsv.schema)?;
    // task-specific pretraining sees the task's own text, labels stripped
    let pretrain_corpus: Vec<String> = train.texts().map(str::to_string).collect();
    let vocab = Vocab::build(pretrain_corpus.iter().cloned(), tsv.vocab_max_size)?;
    if vocab.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "model.vocab_size ({}) is smaller than the built vocabulary ({})",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    Ok(PreparedTask {
        vocab,
        train,
        dev,
        pretrain_corpus,
        synthetic: None,
    })
}

fn tsp_phase(cfg: &RunConfig, mode: Mode, iterations: usize) -> TrainPhase {
    let pair = cfg.phases.for_mode(mode);
    TrainPhase {
        kind: PhaseKind::TaskSpecificPretrain,
        objective: Objective::Mlm,
        trainable_pattern: mode.patterns().0.into(),
        schedule: Schedule::Iterations(iterations),
        optimizer: pair.tsp.optimizer.clone(),
        masking: Some(pair.tsp.masking.clone()),
    }
}

fn ft_phase(cfg: &RunConfig, mode: Mode, epochs: usize, objective: Objective) -> TrainPhase {
    let pair = cfg.phases.for_mode(mode);
    TrainPhase {
        kind: PhaseKind::Finetune,
        objective,
        trainable_pattern: mode.patterns().1.into(),
        schedule: Schedule::Epochs(epochs),
        optimizer: pair.finetune.optimizer.clone(),
        masking: None,
    }
}

fn ft_objective(task: &PreparedTask) -> Objective {
    match task.train.task_kind {
        data::TaskKind::Regression => Objective::Regression,
        _ => Objective::Classification,
    }
}

/// Run task-specific pretraining for one mode, optionally writing checkpoints
/// at the given iteration marks (0 snapshots the fresh model).
pub fn run_tsp(
    cfg: &RunConfig,
    task: &PreparedTask,
    mode: Mode,
    seed: u64,
    iterations: usize,
    checkpoint_at: &[usize],
    checkpoint_dir: Option<&Path>,
    run_id: &str,
) -> Result<(Model, TrainLog)> {
    let model_cfg = cfg.model_for(mode);
    let mut model = adapterbench_core::model::build_model(&model_cfg, seed)?;
    let pair = cfg.phases.for_mode(mode);
    let data_ = PhaseData::mlm_from(&task.pretrain_corpus, &task.vocab, pair.tsp.optimizer.max_seq_len)?;
    let mut opts = RunOptions::new(seed, run_id, "tsp");
    opts.log_every = cfg.log_every;
    opts.checkpoint_at = checkpoint_at.to_vec();
    opts.checkpoint_dir = checkpoint_dir.map(Path::to_path_buf);
    let log = train::run_phase(&mut model, &tsp_phase(cfg, mode, iterations), &data_, &opts, None)?;
    Ok((model, log))
}

/// Fine-tune a model in place and return the dev metrics.
pub fn finetune_and_eval(
    cfg: &RunConfig,
    task: &PreparedTask,
    mode: Mode,
    model: &mut Model,
    seed: u64,
    epochs: usize,
) -> Result<(BTreeMap<String, f64>, TrainLog)> {
    let pair = cfg.phases.for_mode(mode);
    let max_len = pair.finetune.optimizer.max_seq_len;
    let data_ = PhaseData::supervised_from(&task.train, &task.vocab, max_len)?;
    let mut opts = RunOptions::new(seed, "ft", "ft");
    opts.log_every = cfg.log_every;
    let objective = ft_objective(task);
    let log = train::run_phase(model, &ft_phase(cfg, mode, epochs, objective), &data_, &opts, None)?;
    let eval = EvalData::from_dataset(&task.dev, &task.vocab, max_len)?;
    let metrics = train::evaluate(model, &eval, &cfg.metrics, cfg.eval_batch_size)?;
    Ok((metrics, log))
}

/// One complete TSP + fine-tune trial for a (mode, seed) pair.
pub struct TrialOutput {
    pub metrics: BTreeMap<String, f64>,
    pub primary: f64,
    pub model: Model,
}

pub fn run_trial(
    cfg: &RunConfig,
    task: &PreparedTask,
    mode: Mode,
    seed: u64,
    tsp_iterations: Option<usize>,
    ft_epochs: Option<usize>,
) -> Result<TrialOutput> {
    let pair = cfg.phases.for_mode(mode);
    let iterations = tsp_iterations.unwrap_or(pair.tsp.iterations);
    let epochs = ft_epochs.unwrap_or(pair.finetune.epochs);
    let run_id = format!("trial-{}-{}", mode.label(), seed);
    let (mut model, _) = run_tsp(cfg, task, mode, seed, iterations, &[], None, &run_id)?;
    let (metrics, _) = finetune_and_eval(cfg, task, mode, &mut model, seed, epochs)?;
    let primary = primary_of(cfg, &metrics)?;
    Ok(TrialOutput {
        metrics,
        primary,
        model,
    })
}

/// Fine-tune starting from a saved pretraining checkpoint.
pub fn finetune_from_checkpoint(
    cfg: &RunConfig,
    task: &PreparedTask,
    mode: Mode,
    checkpoint: &Path,
    seed: u64,
    epochs: usize,
) -> Result<TrialOutput> {
    let mut model = Model::load_checkpoint(checkpoint)?;
    let (metrics, _) = finetune_and_eval(cfg, task, mode, &mut model, seed, epochs)?;
    let primary = primary_of(cfg, &metrics)?;
    Ok(TrialOutput {
        metrics,
        primary,
        model,
    })
}

pub fn primary_of(cfg: &RunConfig, metrics: &BTreeMap<String, f64>) -> Result<f64> {
    metrics
        .get(cfg.primary_metric.name())
        .copied()
        .ok_or_else(|| {
            Error::Config(format!(
                "primary metric '{}' is not in the metric set",
                cfg.primary_metric.name()
            ))
        })
}

/// Checkpoint file name used by the sweeps: `<run_id>-<phase>-<iter>.ckpt`.
pub fn checkpoint_path(dir: &Path, run_id: &str, phase: &str, iteration: usize) -> PathBuf {
    dir.join(format!("{run_id}-{phase}-{iteration}.ckpt"))
}
