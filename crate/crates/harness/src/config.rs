//! Run configuration: one JSON file describing the model, data, per-mode
//! phase settings, sweep grid, and attack options. Every field can be
//! overridden from the command line with `--path.to.field=value`.

use adapterbench_core::data::{SyntheticTaskSpec, TsvSchema};
use adapterbench_core::model::ModelConfig;
use adapterbench_core::train::{MaskingPolicy, MetricKind, OptimizerConfig};
use adapterbench_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The two training conditions compared throughout: only adapters and heads
/// update, or the whole model updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    WithAdapter,
    WithoutAdapter,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::WithAdapter => "with_adapter",
            Mode::WithoutAdapter => "without_adapter",
        }
    }

    /// Trainable-group patterns for (pretraining, fine-tuning).
    pub fn patterns(&self) -> (&'static str, &'static str) {
        match self {
            Mode::WithAdapter => ("*.adapter|mlm_head", "*.adapter|classifier"),
            Mode::WithoutAdapter => ("*", "*"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsvDataConfig {
    pub train_path: PathBuf,
    pub dev_path: PathBuf,
    pub schema: TsvSchema,
    pub vocab_max_size: usize,
}

/// Exactly one data source: a synthetic task or a pair of TSV files. For TSV
/// data the pretraining corpus is the training split's text with labels
/// stripped.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tsv: Option<TsvDataConfig>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.tsv) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::Config(
                "data must specify exactly one of 'synthetic' or 'tsv'".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TspConfig {
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub masking: MaskingPolicy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FtConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhasePair {
    pub tsp: TspConfig,
    pub finetune: FtConfig,
}

/// Per-mode phase settings; the two conditions typically differ in learning
/// rate and schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModePhases {
    pub with_adapter: PhasePair,
    pub without_adapter: PhasePair,
}

impl ModePhases {
    pub fn for_mode(&self, mode: Mode) -> &PhasePair {
        match mode {
            Mode::WithAdapter => &self.with_adapter,
            Mode::WithoutAdapter => &self.without_adapter,
        }
    }
}

/// Sweep axes mirroring the experiment families: seed restarts, the
/// pretraining-iteration grid, the fine-tuning-epoch grid, and the crossed
/// checkpoint-by-epochs family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    RandomSeed,
    PretrainIterations,
    FinetuneEpochs,
}

/// Grid values: either explicit or `start..=stop` by `step`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueSpec {
    List(Vec<u64>),
    Range { start: u64, stop: u64, step: u64 },
}

impl ValueSpec {
    pub fn expand(&self) -> Vec<u64> {
        match self {
            ValueSpec::List(v) => v.clone(),
            ValueSpec::Range { start, stop, step } => {
                if *step == 0 {
                    return Vec::new();
                }
                let mut out = Vec::new();
                let mut v = *start;
                while v <= *stop {
                    out.push(v);
                    v += step;
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: ValueSpec,
    #[serde(default = "default_trials")]
    pub trials_per_value: usize,
    /// Base for derived trial seeds: trial seed = seed_base + trial_index
    /// (for the random-seed axis the axis value itself is the base). Paired
    /// modes intentionally share seeds so differences reflect architecture.
    #[serde(default)]
    pub seed_base: u64,
    pub modes: Vec<Mode>,
    /// Fine-tuning budget used when the axis varies pretraining.
    #[serde(default = "default_ft_epochs")]
    pub finetune_epochs_fixed: usize,
    /// Pretraining checkpoints the fine-tuning-epochs sweep starts from.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

fn default_trials() -> usize {
    1
}

fn default_ft_epochs() -> usize {
    10
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let values = self.values.expand();
        if values.is_empty() {
            return Err(Error::Config("sweep values must be non-empty".into()));
        }
        if self.axis != SweepAxis::RandomSeed {
            if !values.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Config(
                    "numeric sweep values must be strictly increasing".into(),
                ));
            }
        }
        if self.trials_per_value == 0 {
            return Err(Error::Config("trials_per_value must be at least 1".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("sweep needs at least one mode".into()));
        }
        Ok(())
    }

    /// Total number of runs the sweep will execute.
    pub fn run_count(&self) -> usize {
        self.values.expand().len() * self.trials_per_value * self.modes.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Candidates per word when generating a synthetic lexicon.
    #[serde(default = "default_synonyms")]
    pub n_synonyms: usize,
    #[serde(default = "default_frac")]
    pub max_substitution_frac: f64,
    /// How many dev examples to attack.
    #[serde(default = "default_attack_examples")]
    pub n_examples: usize,
    /// External lexicon TSV; generated from the task when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon_path: Option<PathBuf>,
    #[serde(default)]
    pub lexicon_seed: u64,
}

fn default_synonyms() -> usize {
    3
}

fn default_frac() -> f64 {
    1.0
}

fn default_attack_examples() -> usize {
    50
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            n_synonyms: default_synonyms(),
            max_substitution_frac: default_frac(),
            n_examples: default_attack_examples(),
            lexicon_path: None,
            lexicon_seed: 0,
        }
    }
}

/// The complete experiment description loaded from one JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Architecture; `adapter` describes the with-adapter condition and is
    /// stripped for the without-adapter twin.
    pub model: ModelConfig,
    pub data: DataConfig,
    pub phases: ModePhases,
    #[serde(default = "default_primary")]
    pub primary_metric: MetricKind,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    pub sweep: SweepSpec,
    #[serde(default)]
    pub attack: AttackConfig,
}

fn default_primary() -> MetricKind {
    MetricKind::Accuracy
}

fn default_metrics() -> Vec<MetricKind> {
    vec![MetricKind::Accuracy]
}

fn default_eval_batch() -> usize {
    32
}

fn default_log_every() -> usize {
    10
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.sweep.validate()?;
        if self.sweep.modes.contains(&Mode::WithAdapter) && self.model.adapter.is_none() {
            return Err(Error::Config(
                "with_adapter mode requires model.adapter to be configured".into(),
            ));
        }
        for pair in [&self.phases.with_adapter, &self.phases.without_adapter] {
            pair.tsp.optimizer.validate()?;
            pair.tsp.masking.validate()?;
            pair.finetune.optimizer.validate()?;
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Model config for a mode: with the adapter or with it stripped.
    pub fn model_for(&self, mode: Mode) -> ModelConfig {
        match mode {
            Mode::WithAdapter => self.model.clone(),
            Mode::WithoutAdapter => self.model.without_adapter(),
        }
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::load_with_overrides(path, &[])
    }

    /// Load a config applying dotted-path overrides such as
    /// `model.d_model=64` or `sweep.trials_per_value=3`. Values parse as
    /// JSON when possible and fall back to strings.
    pub fn load_with_overrides(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut value: serde_json::Value = serde_json::from_str(&raw)?;
        for (key, v) in overrides {
            apply_override(&mut value, key, v)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Set `root[path.to.field] = parsed(value)`, creating objects along the way.
pub fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            return Err(Error::Config(format!(
                "override '{key}': '{}' is not an object",
                parts[..i].join(".")
            )));
        }
        let map = cursor.as_object_mut().unwrap();
        if i == parts.len() - 1 {
            map.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "model": {
                "vocab_size": 60, "max_seq_len": 16, "d_model": 16, "n_layers": 2,
                "n_heads": 4, "d_ff": 32, "dropout_rate": 0.1,
                "adapter": {"bottleneck_dim": 4, "nonlinearity": "gelu"}
            },
            "data": {
                "synthetic": {
                    "vocab_size": 60, "seq_len": 16, "rule": "keyword_presence",
                    "n_train": 64, "n_dev": 32, "n_pretrain": 32,
                    "class_balance": 0.5, "noise_rate": 0.0, "seed": 7
                }
            },
            "phases": {
                "with_adapter": {
                    "tsp": {"iterations": 10, "optimizer": {"learning_rate": 1e-3, "batch_size": 8, "max_seq_len": 16}},
                    "finetune": {"epochs": 1, "optimizer": {"learning_rate": 1e-3, "batch_size": 8, "max_seq_len": 16}}
                },
                "without_adapter": {
                    "tsp": {"iterations": 10, "optimizer": {"learning_rate": 5e-4, "batch_size": 8, "max_seq_len": 16}},
                    "finetune": {"epochs": 1, "optimizer": {"learning_rate": 5e-4, "batch_size": 8, "max_seq_len": 16}}
                }
            },
            "sweep": {
                "axis": "random_seed",
                "values": [1, 2, 3],
                "trials_per_value": 1,
                "modes": ["with_adapter", "without_adapter"]
            }
        })
    }

    fn write_cfg(dir: &Path, v: &serde_json::Value) -> PathBuf {
        let p = dir.join("cfg.json");
        std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
        p
    }

    #[test]
    fn loads_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), &minimal_json());
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.sweep.run_count(), 6);
        assert_eq!(cfg.primary_metric, MetricKind::Accuracy);
        assert_eq!(cfg.model_for(Mode::WithoutAdapter).adapter, None);
        assert!(cfg.model_for(Mode::WithAdapter).adapter.is_some());
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), &minimal_json());
        let cfg = RunConfig::load_with_overrides(
            &p,
            &[
                ("model.d_model".into(), "32".into()),
                ("sweep.trials_per_value".into(), "2".into()),
                ("phases.with_adapter.tsp.iterations".into(), "44".into()),
                ("primary_metric".into(), "matthews_corr".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.sweep.trials_per_value, 2);
        assert_eq!(cfg.phases.with_adapter.tsp.iterations, 44);
        assert_eq!(cfg.primary_metric, MetricKind::MatthewsCorr);
    }

    #[test]
    fn value_spec_range_expands_inclusive() {
        let v = ValueSpec::Range {
            start: 2000,
            stop: 20000,
            step: 2000,
        };
        let e = v.expand();
        assert_eq!(e.len(), 10);
        assert_eq!(e[0], 2000);
        assert_eq!(e[9], 20000);
    }

    #[test]
    fn sweep_validation_catches_bad_grids() {
        let mut s = SweepSpec {
            axis: SweepAxis::PretrainIterations,
            values: ValueSpec::List(vec![3, 2]),
            trials_per_value: 1,
            seed_base: 0,
            modes: vec![Mode::WithAdapter],
            finetune_epochs_fixed: 10,
            checkpoints: vec![],
        };
        assert!(s.validate().is_err()); // not increasing
        s.values = ValueSpec::List(vec![]);
        assert!(s.validate().is_err()); // empty
        s.values = ValueSpec::List(vec![1, 2]);
        s.trials_per_value = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn with_adapter_mode_requires_adapter_config() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = minimal_json();
        v["model"]["adapter"] = serde_json::Value::Null;
        let p = write_cfg(dir.path(), &v);
        assert!(RunConfig::load(&p).is_err());
    }
}
