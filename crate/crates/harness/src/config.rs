//! Experiment configuration: one TOML file, overridable key by key.

use std::path::Path;

use ckd_core::baselines::ObjectiveKind;
use ckd_core::distill::DistillConfig;
use ckd_core::model::ModelConfig;
use ckd_core::optim::OptimConfig;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, HarnessError, Result};
use crate::task::TaskSpec;

/// Encoder shape; vocabulary, length and classes come from the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ArchSpec {
    pub fn model_config(&self, task: &TaskSpec) -> ModelConfig {
        ModelConfig {
            num_layers: self.layers,
            hidden_dim: self.hidden,
            num_heads: self.heads,
            ffn_dim: self.ffn,
            vocab_size: task.vocab_size,
            max_seq_len: task.seq_len,
            num_classes: task.num_classes,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    /// Standard deviation of the normal weight initialisation.
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr: 2e-3,
            warmup: 0.1,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            init_std: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn steps(&self, train_size: usize) -> usize {
        self.epochs * train_size.div_ceil(self.batch_size.max(1))
    }

    pub fn optim(&self, total_steps: usize) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            warmup: self.warmup,
            total_steps: total_steps.max(1),
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSection {
    pub widths: Vec<f64>,
    pub depths: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub importance_batch: usize,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        Self {
            widths: vec![1.0, 0.75, 0.5, 0.25],
            depths: vec![1.0, 0.75, 0.5, 0.25],
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            importance_batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    /// Runs per reported cell, with seeds `seed, seed + 1, …`.
    pub num_seeds: usize,
    /// Window sizes for the sweep; empty means `{1, 2, 4, 8, 16, n}`.
    pub deltas: Vec<usize>,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            num_seeds: 4,
            deltas: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub objective: ObjectiveKind,
    pub task: TaskSpec,
    pub teacher: ArchSpec,
    pub student: ArchSpec,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub distill: DistillConfig,
    pub adaptive: AdaptiveSection,
    pub suite: SuiteSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskSpec::default();
        Self {
            seed: 0,
            objective: ObjectiveKind::Ckd,
            distill: DistillConfig {
                delta: task.seq_len.min(16),
                ..Default::default()
            },
            task,
            teacher: ArchSpec {
                layers: 4,
                hidden: 64,
                heads: 4,
                ffn: 256,
                dropout: 0.0,
            },
            student: ArchSpec {
                layers: 2,
                hidden: 32,
                heads: 2,
                ffn: 128,
                dropout: 0.0,
            },
            teacher_train: TrainConfig {
                epochs: 20,
                lr: 1e-3,
                ..Default::default()
            },
            student_train: TrainConfig {
                epochs: 15,
                lr: 5e-3,
                ..Default::default()
            },
            adaptive: AdaptiveSection::default(),
            suite: SuiteSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let Some(last) = last else {
        return config_err(format!("empty override key {key:?}"));
    };
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return config_err(format!("{p:?} in {key:?} is not a table")),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&Self::default().to_toml())
            .expect("default config serializes to valid TOML");
        let file: toml::Table =
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut table, file);
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                return config_err(format!("override {o:?} is not key=value"));
            };
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.teacher.model_config(&self.task)
    }

    pub fn student_config(&self) -> ModelConfig {
        self.student.model_config(&self.task)
    }

    pub fn suite_seeds(&self) -> Vec<u64> {
        (0..self.suite.num_seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn sweep_deltas(&self) -> Vec<usize> {
        if self.suite.deltas.is_empty() {
            let n = self.task.seq_len;
            let mut d: Vec<usize> = [1, 2, 4, 8, 16].into_iter().filter(|&x| x < n).collect();
            d.push(n);
            d
        } else {
            self.suite.deltas.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.teacher_config().validate()?;
        self.student_config().validate()?;
        self.distill.validate()?;
        for t in [&self.teacher_train, &self.student_train] {
            if t.batch_size == 0 {
                return config_err("batch_size must be positive");
            }
            t.optim(1).validate()?;
        }
        if self.suite.num_seeds == 0 {
            return config_err("suite.num_seeds must be positive");
        }
        Ok(())
    }
}
