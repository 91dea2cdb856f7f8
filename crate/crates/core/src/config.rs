//! Model, training and run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::par::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Width of the FFN hidden layer; `None` means `4 * hidden_size`.
    pub ffn_inner: Option<usize>,
    /// Filled from the vocabulary when a run is assembled.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Class count per task, indexed by task id. Its length is the task count.
    pub task_classes: Vec<usize>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_size: 64,
            n_blocks: 2,
            n_heads: 2,
            ffn_inner: None,
            vocab_size: 0,
            max_seq_len: 64,
            task_classes: Vec::new(),
            lora_rank: 8,
            lora_alpha: 8.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_tasks(&self) -> usize {
        self.task_classes.len()
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_inner.unwrap_or(4 * self.hidden_size)
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden_size;
        if h == 0 || self.n_heads == 0 || !h.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden_size {h} must be a positive multiple of n_heads {}",
                self.n_heads
            )));
        }
        if self.n_blocks == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("n_blocks and max_seq_len must be positive".into()));
        }
        let r = self.lora_rank;
        if r == 0 || r > h.min(self.ffn_width()) {
            return Err(Error::Config(format!(
                "lora_rank {r} must be in [1, min(hidden_size, ffn_inner)]"
            )));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be positive".into()));
        }
        if self.task_classes.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        if let Some(k) = self.task_classes.iter().find(|&&k| k < 2) {
            return Err(Error::Config(format!("every task needs at least 2 classes, got {k}")));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover pad, unk and one token".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    MoeCl,
    MoeClNoGan,
    SequentialFt,
    PerTaskFt,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::MoeCl,
        Method::MoeClNoGan,
        Method::SequentialFt,
        Method::PerTaskFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MoeCl => "moe-cl",
            Method::MoeClNoGan => "moe-cl-no-gan",
            Method::SequentialFt => "sequential-ft",
            Method::PerTaskFt => "per-task-ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent, for hand-checkable single steps.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the adversarial term in `L_SFT - gan_weight * L_GAN`.
    pub gan_weight: f64,
    pub seed: u64,
    pub method: Method,
    /// Task ids in training order; `None` means `0..N`.
    pub order: Option<Vec<usize>>,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            optimizer: OptimizerKind::default(),
            epochs: 3,
            batch_size: 16,
            gan_weight: 0.1,
            seed: 0,
            method: Method::MoeCl,
            order: None,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn resolved_order(&self, n_tasks: usize) -> Result<Vec<usize>> {
        let order = self.order.clone().unwrap_or_else(|| (0..n_tasks).collect());
        let mut seen = vec![false; n_tasks];
        if order.len() != n_tasks {
            return Err(Error::Config(format!(
                "order {order:?} is not a permutation of 0..{n_tasks}"
            )));
        }
        for &t in &order {
            if t >= n_tasks || seen[t] {
                return Err(Error::Config(format!(
                    "order {order:?} is not a permutation of 0..{n_tasks}"
                )));
            }
            seen[t] = true;
        }
        Ok(order)
    }

    /// Adversarial weight actually applied: only full MoE-CL trains the
    /// discriminator, and a zero weight removes the adversarial component.
    pub fn effective_gan_weight(&self) -> f64 {
        match self.method {
            Method::MoeCl => self.gan_weight,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gan_weight) {
            return Err(Error::Config(format!(
                "gan_weight {} must lie in [0, 1]",
                self.gan_weight
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Where a run's tasks come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory with a `tasks.json` manifest (as written by `synth`).
    pub dir: Option<PathBuf>,
    /// Generate a synthetic benchmark in memory instead.
    pub synth: Option<SynthConfig>,
    /// Upper bound on vocabulary size, including reserved ids.
    pub vocab_cap: Option<usize>,
}

/// The single document a run is configured from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            hidden_size: 8,
            vocab_size: 10,
            task_classes: vec![2, 3],
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn validates_invariants() {
        assert!(small().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.lora_rank = 9;
        assert!(c.validate().is_err());
        let mut c = small();
        c.task_classes = vec![1];
        assert!(c.validate().is_err());
    }

    #[test]
    fn order_must_be_permutation() {
        let mut t = TrainConfig::default();
        assert_eq!(t.resolved_order(3).unwrap(), vec![0, 1, 2]);
        t.order = Some(vec![2, 0, 1]);
        assert_eq!(t.resolved_order(3).unwrap(), vec![2, 0, 1]);
        t.order = Some(vec![2, 2, 1]);
        assert!(t.resolved_order(3).is_err());
        t.order = Some(vec![0, 1]);
        assert!(t.resolved_order(3).is_err());
    }

    #[test]
    fn gan_weight_range() {
        let mut t = TrainConfig { gan_weight: 1.5, ..TrainConfig::default() };
        assert!(t.validate().is_err());
        t.gan_weight = 0.1;
        t.method = Method::MoeClNoGan;
        assert_eq!(t.effective_gan_weight(), 0.0);
    }

    #[test]
    fn method_parse() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("ewc".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::default();
        c.model.task_classes = vec![2, 2];
        c.train.order = Some(vec![1, 0]);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}
