//! Objectives, optimizer, and the two-phase pipeline.
//!
//! Phase one is task-specific pretraining: masked-language modeling on the
//! task's own unlabeled text. Phase two is supervised fine-tuning of a
//! classification (or regression) head on the pooled output. Either phase can
//! run in with-adapter mode, where the trainable pattern covers only adapter
//! groups and heads and the backbone stays byte-identical, or in
//! without-adapter mode where everything updates.
//!
//! Determinism: given (seed, config, data) every batch order, mask draw,
//! dropout mask, and therefore every logged loss is reproducible. Shuffling,
//! masking, and dropout each consume their own derived seed stream.

use crate::data::{self, Encoded, Label, LabeledDataset, TaskKind, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{self, GradNormSnapshot};
use crate::model::{Model, TokenBatch};
use crate::rng::{self, ChaCha8Rng};
use crate::tensor::{NodeId, IGNORE_INDEX};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

// ── Masking ─────────────────────────────────────────────────────────────

/// Masked-language-model corruption policy: each maskable (non-special)
/// position is selected independently with `mask_rate`; selected positions
/// become `[MASK]` with `mask_token_frac`, a random non-special token with
/// `random_token_frac`, and stay unchanged with `keep_frac`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub mask_rate: f64,
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            mask_token_frac: 0.8,
            random_token_frac: 0.1,
            keep_frac: 0.1,
            seed: 0,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!(
                "mask_rate {} must lie in [0,1]",
                self.mask_rate
            )));
        }
        let total = self.mask_token_frac + self.random_token_frac + self.keep_frac;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mask/random/keep fractions must sum to 1, got {total}"
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut p = self.clone();
        p.seed = seed;
        p
    }
}

/// Corrupted ids plus MLM targets: the original id at selected positions,
/// `IGNORE_INDEX` everywhere else.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub corrupted: TokenBatch,
    pub targets: Vec<i64>,
}

/// Apply a [`MaskingPolicy`] to a batch. Special tokens (ids below
/// [`data::N_SPECIAL`]) are never selected. Deterministic given the policy
/// seed; positions are visited row-major and each draws from the same stream.
pub fn mask_batch(batch: &TokenBatch, policy: &MaskingPolicy, vocab_size: usize) -> Result<MaskedBatch> {
    policy.validate()?;
    if vocab_size <= data::N_SPECIAL {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} has no maskable tokens"
        )));
    }
    if !batch.ids.iter().any(|id| *id >= data::N_SPECIAL) {
        return Err(Error::Data(
            "batch contains no maskable (non-special) tokens".into(),
        ));
    }
    let mut rng_ = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut corrupted = batch.ids.clone();
    let mut targets = vec![IGNORE_INDEX; batch.ids.len()];
    for (i, &id) in batch.ids.iter().enumerate() {
        if id < data::N_SPECIAL {
            continue;
        }
        if rng_.gen::<f64>() >= policy.mask_rate {
            continue;
        }
        targets[i] = id as i64;
        let split: f64 = rng_.gen();
        if split < policy.mask_token_frac {
            corrupted[i] = data::MASK;
        } else if split < policy.mask_token_frac + policy.random_token_frac {
            corrupted[i] = rng_.gen_range(data::N_SPECIAL..vocab_size);
        } // else: keep the original token
    }
    Ok(MaskedBatch {
        corrupted: TokenBatch::new(batch.batch, batch.seq, corrupted, batch.mask.clone())?,
        targets,
    })
}

use rand_chacha::rand_core::SeedableRng;

// ── Losses ──────────────────────────────────────────────────────────────

/// A forward pass extended with a scalar loss node.
pub struct LossComputation {
    pub pass: crate::model::ForwardPass,
    pub loss_node: NodeId,
    pub loss: f64,
}

impl LossComputation {
    /// Backpropagate and accumulate into the model's gradient buffers.
    pub fn backward_into(mut self, model: &mut Model) -> Result<()> {
        self.pass.graph.backward(self.loss_node)?;
        self.pass.accumulate_grads(model);
        Ok(())
    }
}

/// Masked-language-model loss: vocabulary logits are the sequence output
/// against the transposed token embedding (weight tying) plus a trainable
/// bias, scored by cross-entropy at the non-ignored positions.
pub fn mlm_loss(
    model: &Model,
    masked: &MaskedBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossComputation> {
    let bias = model
        .mlm_bias_param()
        .ok_or_else(|| Error::Usage("mlm_loss requires attach_mlm_head() first".into()))?;
    let mut pass = model.forward(&masked.corrupted, dropout_rng)?;
    let (b, s, d) = (pass.batch, pass.seq, model.config.d_model);
    let seq_out = pass.sequence_output;
    let emb_node = pass.param_node(model.token_embedding_param());
    let bias_node = pass.param_node(bias);
    let g = &mut pass.graph;
    let flat = g.reshape(seq_out, &[b * s, d])?;
    let emb_t = g.transpose_last2(emb_node)?;
    let scores = g.matmul(flat, emb_t)?;
    let logits = g.add(scores, bias_node)?;
    let loss_node = g.cross_entropy(logits, &masked.targets, IGNORE_INDEX)?;
    let loss = g.data(loss_node)[0];
    Ok(LossComputation {
        pass,
        loss_node,
        loss,
    })
}

/// Cross-entropy of the classifier head applied to the pooled output.
pub fn classification_loss(
    model: &Model,
    batch: &TokenBatch,
    labels: &[usize],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossComputation> {
    let (w, bias) = model
        .classifier_params()
        .ok_or_else(|| Error::Usage("classification_loss requires attach_classifier() first".into()))?;
    if labels.len() != batch.batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.batch
        )));
    }
    let mut pass = model.forward(batch, dropout_rng)?;
    let (pooled, w_node, b_node) = (pass.pooled, pass.param_node(w), pass.param_node(bias));
    let g = &mut pass.graph;
    let scores = g.matmul(pooled, w_node)?;
    let logits = g.add(scores, b_node)?;
    let targets: Vec<i64> = labels.iter().map(|l| *l as i64).collect();
    let loss_node = g.cross_entropy(logits, &targets, IGNORE_INDEX)?;
    let loss = g.data(loss_node)[0];
    Ok(LossComputation {
        pass,
        loss_node,
        loss,
    })
}

/// Mean squared error of a one-dimensional head on the pooled output.
pub fn regression_loss(
    model: &Model,
    batch: &TokenBatch,
    targets: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossComputation> {
    let (w, bias) = model
        .classifier_params()
        .ok_or_else(|| Error::Usage("regression_loss requires attach_classifier(1, ..) first".into()))?;
    if targets.len() != batch.batch {
        return Err(Error::Dimension(format!(
            "{} targets for a batch of {}",
            targets.len(),
            batch.batch
        )));
    }
    let mut pass = model.forward(batch, dropout_rng)?;
    let (pooled, w_node, b_node) = (pass.pooled, pass.param_node(w), pass.param_node(bias));
    let g = &mut pass.graph;
    let scores = g.matmul(pooled, w_node)?;
    let preds = g.add(scores, b_node)?;
    let y = g.constant(&[batch.batch, 1], targets.to_vec())?;
    let diff = g.sub(preds, y)?;
    let sq = g.mul(diff, diff)?;
    let loss_node = g.mean_all(sq);
    let loss = g.data(loss_node)[0];
    Ok(LossComputation {
        pass,
        loss_node,
        loss,
    })
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Adam hyperparameters plus the batching knobs a phase needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, decoupled weight decay, and optional global
/// gradient-norm clipping. Only parameters in trainable groups are touched.
pub struct AdamOptimizer {
    config: OptimizerConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamOptimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    /// One update from the gradients currently in the model. Returns the
    /// global (pre-clip) gradient norm over trainable parameters.
    pub fn step(&mut self, model: &mut Model) -> Result<f64> {
        if self.m.len() != model.params().len() {
            self.m.resize(model.params().len(), Vec::new());
            self.v.resize(model.params().len(), Vec::new());
        }
        let trainable: Vec<crate::model::ParamId> = model
            .groups()
            .iter()
            .filter(|g| g.trainable)
            .flat_map(|g| g.params.iter().copied())
            .collect();

        // NaN check and global norm in one pass
        let mut sq_sum = 0.0;
        for pid in &trainable {
            let p = model.param(*pid);
            for g in &p.grad {
                if !g.is_finite() {
                    let group = model
                        .groups()
                        .iter()
                        .find(|gr| gr.params.contains(pid))
                        .map(|gr| gr.name.clone())
                        .unwrap_or_default();
                    return Err(Error::Training(format!(
                        "non-finite gradient in group '{group}' (parameter '{}')",
                        p.name
                    )));
                }
                sq_sum += g * g;
            }
        }
        let global_norm = sq_sum.sqrt();
        let clip_scale = match self.config.grad_clip_norm {
            Some(max) if global_norm > max && global_norm > 0.0 => max / global_norm,
            _ => 1.0,
        };

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = self.config.learning_rate;

        for pid in &trainable {
            let i = pid.0;
            let numel = model.param(*pid).numel();
            if self.m[i].len() != numel {
                self.m[i] = vec![0.0; numel];
                self.v[i] = vec![0.0; numel];
            }
            let p = model.param_mut(*pid);
            for j in 0..numel {
                let g = p.grad[j] * clip_scale;
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g * g;
                let m_hat = self.m[i][j] / bc1;
                let v_hat = self.v[i][j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + self.config.eps);
                if self.config.weight_decay > 0.0 {
                    p.data[j] -= lr * self.config.weight_decay * p.data[j];
                }
            }
        }
        Ok(global_norm)
    }
}

// ── Phases ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    TaskSpecificPretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Mlm,
    Classification,
    Regression,
}

/// Either a fixed number of optimizer steps or whole passes over the data.
/// One "iteration" is one optimizer step on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Iterations(usize),
    Epochs(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPhase {
    pub kind: PhaseKind,
    pub objective: Objective,
    /// Glob pattern of trainable groups, e.g. `"*"` or
    /// `"*.adapter|classifier"`.
    pub trainable_pattern: String,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    /// Masking policy for MLM phases; per-iteration seeds are derived from
    /// the run seed, the stored seed only matters for standalone use.
    #[serde(default)]
    pub masking: Option<MaskingPolicy>,
}

impl TrainPhase {
    pub fn validate(&self, model: &Model) -> Result<()> {
        self.optimizer.validate()?;
        if self.kind == PhaseKind::TaskSpecificPretrain && self.objective != Objective::Mlm {
            return Err(Error::Config(
                "task-specific pretraining must use the mlm objective".into(),
            ));
        }
        if model.config.adapter.is_some() {
            // with-adapter mode trains adapters and heads only
            let offending = model
                .groups()
                .iter()
                .find(|g| {
                    g.kind == crate::model::GroupKind::Backbone
                        && crate::model::pattern_matches(&self.trainable_pattern, &g.name)
                })
                .map(|g| g.name.clone());
            if let Some(name) = offending {
                return Err(Error::Config(format!(
                    "with-adapter mode must keep the backbone frozen, but pattern '{}' matches group '{name}'",
                    self.trainable_pattern
                )));
            }
        }
        Ok(())
    }
}

/// Training data prepared for one phase.
#[derive(Debug, Clone)]
pub enum PhaseData {
    Mlm(Vec<Encoded>),
    Classification {
        examples: Vec<Encoded>,
        labels: Vec<usize>,
        n_classes: usize,
    },
    Regression {
        examples: Vec<Encoded>,
        targets: Vec<f64>,
    },
}

impl PhaseData {
    pub fn len(&self) -> usize {
        match self {
            PhaseData::Mlm(e) => e.len(),
            PhaseData::Classification { examples, .. } => examples.len(),
            PhaseData::Regression { examples, .. } => examples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Encode an unlabeled corpus for MLM.
    pub fn mlm_from(corpus: &[String], vocab: &Vocab, max_seq_len: usize) -> Result<PhaseData> {
        let enc = corpus
            .iter()
            .map(|t| data::encode(t, vocab, max_seq_len, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhaseData::Mlm(enc))
    }

    /// Encode a labeled dataset for its task objective.
    pub fn supervised_from(
        ds: &LabeledDataset,
        vocab: &Vocab,
        max_seq_len: usize,
    ) -> Result<PhaseData> {
        let examples = ds
            .examples
            .iter()
            .map(|e| data::encode(&e.text, vocab, max_seq_len, e.text_pair.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        match ds.task_kind {
            TaskKind::Regression => Ok(PhaseData::Regression {
                examples,
                targets: ds.examples.iter().map(|e| e.label.value()).collect(),
            }),
            _ => {
                let labels = ds
                    .examples
                    .iter()
                    .map(|e| {
                        e.label.class().ok_or_else(|| {
                            Error::Data("classification dataset holds a non-class label".into())
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PhaseData::Classification {
                    examples,
                    labels,
                    n_classes: ds.n_classes,
                })
            }
        }
    }
}

/// One telemetry record, also the JSON-lines schema of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norms: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// Per-phase training log plus emitted checkpoint paths.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub iterations_run: usize,
}

impl TrainLog {
    /// Append records to a JSON-lines file, one record per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Knobs for one `run_phase` invocation that are not part of the phase spec:
/// seeding, telemetry cadence, and checkpoint emission.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Root seed for this trial; shuffle, masking, and dropout streams are
    /// derived from it.
    pub seed: u64,
    /// Record telemetry every this many iterations (and always on the last).
    pub log_every: usize,
    /// Iterations at which to write a checkpoint. `0` snapshots the model
    /// before any update.
    pub checkpoint_at: Vec<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub run_id: String,
    /// Short label used in log records and checkpoint names ("tsp", "ft").
    pub phase_label: String,
    /// Compute gradients for frozen groups too (telemetry probes).
    pub probe_frozen_grads: bool,
}

impl RunOptions {
    pub fn new(seed: u64, run_id: &str, phase_label: &str) -> Self {
        Self {
            seed,
            log_every: 10,
            checkpoint_at: Vec::new(),
            checkpoint_dir: None,
            run_id: run_id.to_string(),
            phase_label: phase_label.to_string(),
            probe_frozen_grads: false,
        }
    }
}

/// Execute one training phase. Attaches the head the objective needs
/// (re-initializing the classifier at fine-tune start), applies the phase's
/// trainable pattern, then runs the schedule. Fully deterministic given
/// (seed, phase, data).
pub fn run_phase(
    model: &mut Model,
    phase: &TrainPhase,
    data_: &PhaseData,
    opts: &RunOptions,
    mut callback: Option<&mut dyn FnMut(&LogRecord)>,
) -> Result<TrainLog> {
    if data_.is_empty() {
        return Err(Error::Data("phase data is empty".into()));
    }
    match (&phase.objective, data_) {
        (Objective::Mlm, PhaseData::Mlm(_))
        | (Objective::Classification, PhaseData::Classification { .. })
        | (Objective::Regression, PhaseData::Regression { .. }) => {}
        _ => {
            return Err(Error::Usage(
                "phase objective does not match the prepared data".into(),
            ))
        }
    }

    // heads: MLM bias for pretraining; a fresh classifier for fine-tuning
    match phase.objective {
        Objective::Mlm => model.attach_mlm_head(),
        Objective::Classification => {
            let n = match data_ {
                PhaseData::Classification { n_classes, .. } => *n_classes,
                _ => unreachable!(),
            };
            model.attach_classifier(n, rng::derive_seed(opts.seed, rng::stream::HEAD_INIT))?;
        }
        Objective::Regression => {
            model.attach_classifier(1, rng::derive_seed(opts.seed, rng::stream::HEAD_INIT))?;
        }
    }
    phase.validate(model)?;
    model.set_trainable(&phase.trainable_pattern);

    let mut optimizer = AdamOptimizer::new(phase.optimizer.clone())?;
    let mut log = TrainLog::default();
    let started = Instant::now();

    let n = data_.len();
    let batch_size = phase.optimizer.batch_size.min(n);
    let batches_per_epoch = n.div_ceil(batch_size);
    let total_iterations = match phase.schedule {
        Schedule::Iterations(it) => it,
        Schedule::Epochs(ep) => ep * batches_per_epoch,
    };

    let ckpt = |model: &Model, iteration: usize, log: &mut TrainLog| -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            let name = format!("{}-{}-{}.ckpt", opts.run_id, opts.phase_label, iteration);
            let path = dir.join(name);
            model.save_checkpoint(&path)?;
            log.checkpoints.push((iteration, path));
        }
        Ok(())
    };
    if opts.checkpoint_at.contains(&0) {
        ckpt(model, 0, &mut log)?;
    }
    if total_iterations == 0 {
        return Ok(log);
    }

    let mask_policy = phase.masking.clone().unwrap_or_default();
    let mut iteration = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    'outer: for epoch in 0.. {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::derive_seed2(
            opts.seed,
            rng::stream::SHUFFLE,
            epoch as u64,
        ));
        rng::shuffle(&mut order, &mut shuffle_rng);
        for chunk in order.chunks(batch_size) {
            iteration += 1;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng::derive_seed2(
                opts.seed,
                rng::stream::DROPOUT,
                iteration as u64,
            ));
            model.zero_grads();
            let loss_value = match data_ {
                PhaseData::Mlm(examples) => {
                    let batch = gather_batch(examples, chunk)?;
                    let policy = mask_policy.with_seed(rng::derive_seed2(
                        opts.seed,
                        rng::stream::MASKING,
                        iteration as u64,
                    ));
                    let masked = mask_batch(&batch, &policy, model.config.vocab_size)?;
                    let lc = mlm_loss_probed(model, &masked, Some(&mut dropout_rng), opts.probe_frozen_grads)?;
                    let loss = lc.loss;
                    lc.backward_into(model)?;
                    loss
                }
                PhaseData::Classification { examples, labels, .. } => {
                    let batch = gather_batch(examples, chunk)?;
                    let batch_labels: Vec<usize> = chunk.iter().map(|i| labels[*i]).collect();
                    let lc = classification_loss(model, &batch, &batch_labels, Some(&mut dropout_rng))?;
                    let loss = lc.loss;
                    lc.backward_into(model)?;
                    loss
                }
                PhaseData::Regression { examples, targets } => {
                    let batch = gather_batch(examples, chunk)?;
                    let batch_targets: Vec<f64> = chunk.iter().map(|i| targets[*i]).collect();
                    let lc = regression_loss(model, &batch, &batch_targets, Some(&mut dropout_rng))?;
                    let loss = lc.loss;
                    lc.backward_into(model)?;
                    loss
                }
            };
            optimizer.step(model)?;

            if iteration % opts.log_every == 0 || iteration == total_iterations {
                let snapshot: GradNormSnapshot = metrics::grad_norm_by_group(model, iteration);
                let record = LogRecord {
                    phase: opts.phase_label.clone(),
                    iteration,
                    loss: loss_value,
                    lr: optimizer.learning_rate(),
                    grad_norms: snapshot.norms,
                    wall_ms: started.elapsed().as_millis() as u64,
                };
                if let Some(cb) = callback.as_mut() {
                    cb(&record);
                }
                log.records.push(record);
            }
            if opts.checkpoint_at.contains(&iteration) {
                ckpt(model, iteration, &mut log)?;
            }
            if iteration >= total_iterations {
                break 'outer;
            }
        }
    }
    log.iterations_run = iteration;
    Ok(log)
}

/// `mlm_loss` with the option of probing gradients on frozen groups.
fn mlm_loss_probed(
    model: &Model,
    masked: &MaskedBatch,
    dropout_rng: Option<&mut ChaCha8Rng>,
    probe: bool,
) -> Result<LossComputation> {
    if !probe {
        return mlm_loss(model, masked, dropout_rng);
    }
    let bias = model
        .mlm_bias_param()
        .ok_or_else(|| Error::Usage("mlm_loss requires attach_mlm_head() first".into()))?;
    let mut pass = model.forward_probed(&masked.corrupted, dropout_rng, true)?;
    let (b, s, d) = (pass.batch, pass.seq, model.config.d_model);
    let seq_out = pass.sequence_output;
    let emb_node = pass.param_node(model.token_embedding_param());
    let bias_node = pass.param_node(bias);
    let g = &mut pass.graph;
    let flat = g.reshape(seq_out, &[b * s, d])?;
    let emb_t = g.transpose_last2(emb_node)?;
    let scores = g.matmul(flat, emb_t)?;
    let logits = g.add(scores, bias_node)?;
    let loss_node = g.cross_entropy(logits, &masked.targets, IGNORE_INDEX)?;
    let loss = g.data(loss_node)[0];
    Ok(LossComputation {
        pass,
        loss_node,
        loss,
    })
}

fn gather_batch(examples: &[Encoded], idx: &[usize]) -> Result<TokenBatch> {
    let refs: Vec<&Encoded> = idx.iter().map(|i| &examples[*i]).collect();
    data::batch_of(&refs)
}

// ── Evaluation ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    F1Binary,
    MatthewsCorr,
    Pearson,
    Spearman,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::F1Binary => "f1",
            MetricKind::MatthewsCorr => "matthews_corr",
            MetricKind::Pearson => "pearson",
            MetricKind::Spearman => "spearman",
        }
    }
}

/// Examples plus gold labels ready for evaluation.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub examples: Vec<Encoded>,
    pub labels: Vec<Label>,
}

impl EvalData {
    pub fn from_dataset(ds: &LabeledDataset, vocab: &Vocab, max_seq_len: usize) -> Result<EvalData> {
        let examples = ds
            .examples
            .iter()
            .map(|e| data::encode(&e.text, vocab, max_seq_len, e.text_pair.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalData {
            examples,
            labels: ds.examples.iter().map(|e| e.label).collect(),
        })
    }
}

/// Class probabilities for a batch, one row per example. Evaluation mode
/// (no dropout), deterministic.
pub fn class_probabilities(model: &Model, batch: &TokenBatch) -> Result<Vec<Vec<f64>>> {
    let (w, bias) = model
        .classifier_params()
        .ok_or_else(|| Error::Usage("classification requires attach_classifier() first".into()))?;
    let mut pass = model.forward(batch, None)?;
    let (pooled, w_node, b_node) = (pass.pooled, pass.param_node(w), pass.param_node(bias));
    let g = &mut pass.graph;
    let scores = g.matmul(pooled, w_node)?;
    let logits = g.add(scores, b_node)?;
    let probs = g.softmax(logits, 1)?;
    let flat = g.data(probs);
    let c = g.shape(probs)[1];
    Ok(flat.chunks(c).map(|r| r.to_vec()).collect())
}

/// Predicted class per example; argmax with ties broken toward the lowest
/// class index.
pub fn predict_classes(model: &Model, examples: &[Encoded], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        let batch = data::batch_of(&refs)?;
        for row in class_probabilities(model, &batch)? {
            preds.push(argmax_lowest(&row));
        }
    }
    Ok(preds)
}

/// Raw regression scores per example.
pub fn predict_values(model: &Model, examples: &[Encoded], batch_size: usize) -> Result<Vec<f64>> {
    let (w, bias) = model
        .classifier_params()
        .ok_or_else(|| Error::Usage("regression requires attach_classifier(1, ..) first".into()))?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        let batch = data::batch_of(&refs)?;
        let mut pass = model.forward(&batch, None)?;
        let (pooled, w_node, b_node) = (pass.pooled, pass.param_node(w), pass.param_node(bias));
        let g = &mut pass.graph;
        let scores = g.matmul(pooled, w_node)?;
        let preds = g.add(scores, b_node)?;
        out.extend_from_slice(g.data(preds));
    }
    Ok(out)
}

pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Compute the requested metrics on model predictions over a dataset.
/// Deterministic: evaluation never applies dropout.
pub fn evaluate(
    model: &Model,
    data_: &EvalData,
    metric_set: &[MetricKind],
    batch_size: usize,
) -> Result<BTreeMap<String, f64>> {
    if data_.examples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut out = BTreeMap::new();
    let needs_classes = metric_set.iter().any(|m| {
        matches!(
            m,
            MetricKind::Accuracy | MetricKind::F1Binary | MetricKind::MatthewsCorr
        )
    });
    let needs_values = metric_set
        .iter()
        .any(|m| matches!(m, MetricKind::Pearson | MetricKind::Spearman));

    if needs_classes {
        let preds = predict_classes(model, &data_.examples, batch_size)?;
        let labels: Vec<usize> = data_
            .labels
            .iter()
            .map(|l| {
                l.class()
                    .ok_or_else(|| Error::Data("class metric on non-class labels".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        for m in metric_set {
            match m {
                MetricKind::Accuracy => {
                    out.insert(m.name().to_string(), metrics::accuracy(&preds, &labels)?);
                }
                MetricKind::F1Binary => {
                    out.insert(m.name().to_string(), metrics::f1_binary(&preds, &labels, 1)?);
                }
                MetricKind::MatthewsCorr => {
                    out.insert(m.name().to_string(), metrics::matthews_corr(&preds, &labels)?);
                }
                _ => {}
            }
        }
    }
    if needs_values {
        let preds = predict_values(model, &data_.examples, batch_size)?;
        let golds: Vec<f64> = data_.labels.iter().map(|l| l.value()).collect();
        let (pearson, spearman) = metrics::pearson_spearman(&preds, &golds)?;
        for m in metric_set {
            match m {
                MetricKind::Pearson => {
                    out.insert(m.name().to_string(), pearson);
                }
                MetricKind::Spearman => {
                    out.insert(m.name().to_string(), spearman);
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

fn fnv1a(ids: &[usize]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for id in ids {
        h ^= *id as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Corpus-level MLM evaluation loss: total negative log-likelihood over all
/// masked positions divided by their count. Each example's mask is derived
/// from the policy seed and the example's own token ids, so reordering the
/// corpus or changing the batch size cannot change which positions are
/// scored; the result is invariant to batch order up to float addition noise.
pub fn evaluate_mlm(
    model: &Model,
    examples: &[Encoded],
    policy: &MaskingPolicy,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty corpus".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        // per-example masks, stitched back into one batch
        let seq = chunk[0].token_ids.len();
        let mut ids = Vec::with_capacity(chunk.len() * seq);
        let mut mask = Vec::with_capacity(chunk.len() * seq);
        let mut targets = Vec::with_capacity(chunk.len() * seq);
        for e in chunk {
            let single = TokenBatch::new(1, seq, e.token_ids.clone(), e.attention_mask.to_vec())?;
            let p = policy.with_seed(rng::derive_seed(policy.seed, fnv1a(&e.token_ids)));
            match mask_batch(&single, &p, model.config.vocab_size) {
                Ok(m) => {
                    ids.extend_from_slice(&m.corrupted.ids);
                    targets.extend_from_slice(&m.targets);
                }
                // a pathological all-special example scores nothing
                Err(Error::Data(_)) => {
                    ids.extend_from_slice(&e.token_ids);
                    targets.extend(std::iter::repeat(IGNORE_INDEX).take(seq));
                }
                Err(err) => return Err(err),
            }
            mask.extend_from_slice(&e.attention_mask);
        }
        let masked = MaskedBatch {
            corrupted: TokenBatch::new(chunk.len(), seq, ids, mask)?,
            targets,
        };
        let lc = mlm_loss(model, &masked, None)?;
        let n_masked = masked.targets.iter().filter(|t| **t != IGNORE_INDEX).count();
        total += lc.loss * n_masked as f64;
        count += n_masked;
    }
    if count == 0 {
        return Err(Error::Data("masking selected no positions to score".into()));
    }
    Ok(total / count as f64)
}
