use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use hybrid_core::bench::BenchScenario;
use hybrid_core::conversion::TrainConfig;
use hybrid_core::grpo::GrpoConfig;
use hybrid_core::model::ModelConfig;
use hybrid_core::optim::OptimizerConfig;

/// Distillation or SFT stage settings. `lr` overrides the shared
/// optimizer's peak rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub train: TrainConfig,
    pub lr: Option<f64>,
    /// Fraction of the corpus held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            lr: None,
            eval_fraction: 0.05,
        }
    }
}

impl StageConfig {
    fn with_lr(lr: f64) -> Self {
        Self {
            lr: Some(lr),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Samples per problem.
    pub samples: usize,
    pub temperature: f64,
    pub max_tokens: usize,
    pub ks: Vec<usize>,
    pub maj_trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 8,
            temperature: 0.7,
            max_tokens: 256,
            ks: vec![1, 2, 4, 8],
            maj_trials: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub scenario: BenchScenario,
    pub batches: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scenario: BenchScenario::default(),
            batches: vec![8, 16, 32, 64, 128, 256, 512],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Pretraining of the all-attention teacher.
    pub teacher: StageConfig,
    pub distill: StageConfig,
    pub sft: StageConfig,
    pub grpo: GrpoConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            teacher: StageConfig::with_lr(1e-3),
            distill: StageConfig::with_lr(1e-5),
            sft: StageConfig::with_lr(6e-6),
            grpo: GrpoConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Dotted paths of keys in `given` that `known` does not have.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else {
        return;
    };
    for (key, v) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(kv) => unknown_keys(v, kv, &path, out),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let mut bad = Vec::new();
        unknown_keys(&value, &serde_json::to_value(Self::default())?, "", &mut bad);
        if !bad.is_empty() {
            bail!("unknown config keys: {}", bad.join(", "));
        }
        let cfg: Self = serde_json::from_value(value).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `HYBRID_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::parse(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => Self::default(),
        };
        if let Ok(s) = std::env::var("HYBRID_SEED") {
            cfg.seed = s.parse().with_context(|| format!("HYBRID_SEED={s} is not an integer"))?;
        }
        cfg.teacher.train.seed = cfg.seed;
        cfg.distill.train.seed = cfg.seed;
        cfg.sft.train.seed = cfg.seed;
        cfg.grpo.seed = cfg.seed;
        cfg.bench.scenario.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.grpo.validate()?;
        for (name, s) in [("teacher", &self.teacher), ("distill", &self.distill), ("sft", &self.sft)] {
            if !(0.0..1.0).contains(&s.eval_fraction) {
                bail!("{name}.eval_fraction must lie in [0, 1)");
            }
        }
        if self.eval.samples == 0 || self.eval.maj_trials == 0 {
            bail!("eval.samples and eval.maj_trials must be positive");
        }
        Ok(())
    }

    /// Shared optimizer with a stage's learning-rate override.
    pub fn stage_optimizer(&self, stage: &StageConfig) -> OptimizerConfig {
        OptimizerConfig {
            lr: stage.lr.unwrap_or(self.optimizer.lr),
            ..self.optimizer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_fill_in() {
        let c = RunConfig::parse(r#"{"grpo": {"steps": 7}, "model": {"n_layers": 4, "attn_layers": [3]}}"#).unwrap();
        assert_eq!(c.grpo.steps, 7);
        assert_eq!(c.grpo.group_size, 8);
        assert_eq!(c.model.d_model, 256);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let e = RunConfig::parse(r#"{"grpo": {"stepz": 1}, "extra": 2, "sft": {"train": {"lr": 1}}}"#).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("grpo.stepz") && msg.contains("extra") && msg.contains("sft.train.lr"), "{msg}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse(r#"{"grpo": {"batch_size": 3, "ppo_batch": 2}}"#).is_err());
    }
}
