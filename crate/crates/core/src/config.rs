//! Run configuration files and grid sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{GeneratorSpec, TextConfig};
use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::train::TrainConfig;

/// Environment variable that replaces `training.seed`.
pub const SEED_ENV: &str = "HRGNN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Seed of a single training run.
    pub seed: u64,
    /// Seeds of a multi-seed run.
    pub seeds: Vec<u64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            seed: t.seed,
            seeds: (1..=10).collect(),
        }
    }
}

impl TrainingSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            seed,
        }
    }
}

/// Where interviews come from: a split manifest, or else the generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub generator: GeneratorSpec,
    pub text: TextConfig,
    pub stop_words: Option<PathBuf>,
    /// Pretrained vectors, one `token v1 .. v_dim` line per token.
    pub embeddings: Option<PathBuf>,
    pub freeze_embeddings: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub training: TrainingSection,
    pub data: DataSection,
    /// Grid over dotted keys such as `model.node_dim`, each with its list of
    /// values.
    pub sweep: BTreeMap<String, Vec<Value>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a configuration file; relative data paths are taken from the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.data.stop_words, &mut cfg.data.embeddings]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.training.train_config(self.training.seed).validate()?;
        if self.training.seeds.is_empty() {
            return Err(Error::Config("training.seeds must list at least one seed".into()));
        }
        if self.data.manifest.is_none() {
            self.data.generator.validate()?;
        }
        Ok(())
    }

    /// Model section with the ablation section applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            ablation: self.ablation.clone(),
            ..self.model.clone()
        }
    }

    /// Replaces `training.seed` with `HRGNN_SEED` when that is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.training.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every grid point of `sweep`, in lexicographic key order with the last
    /// key varying fastest. Each point has an empty sweep.
    pub fn grid(&self) -> Result<Vec<(BTreeMap<String, Value>, RunConfig)>> {
        let mut base = self.clone();
        base.sweep.clear();
        let base_value = serde_json::to_value(&base).expect("config serializes");
        let keys: Vec<&String> = self.sweep.keys().collect();
        let mut points = vec![BTreeMap::new()];
        for key in &keys {
            let values = &self.sweep[*key];
            if values.is_empty() {
                return Err(Error::Config(format!("sweep key {key} lists no values")));
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut p = p.clone();
                        p.insert((*key).clone(), v.clone());
                        p
                    })
                })
                .collect();
        }
        points
            .into_iter()
            .map(|point| {
                let mut value = base_value.clone();
                for (key, v) in &point {
                    set_path(&mut value, key, v.clone())?;
                }
                let cfg: RunConfig =
                    serde_json::from_value(value).map_err(|e| Error::Config(format!("sweep point {point:?}: {e}")))?;
                cfg.validate()?;
                Ok((point, cfg))
            })
            .collect()
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("sweep key {path}: {part} is not inside a section")))?;
        if k + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("sweep key {path} names no setting")));
            }
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("sweep key {path} names no setting")))?;
    }
    Err(Error::Config("empty sweep key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.node_dim, 256);
        assert_eq!(cfg.training.batch_size, 128);
        assert_eq!(cfg.training.epochs, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(r#"{"model": {"nodes": 3}}"#).is_err());
        assert!(RunConfig::parse(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn ablation_section_reaches_the_model() {
        let cfg = RunConfig::parse(r#"{"ablation": {"removed_relations": ["RQA"]}}"#).unwrap();
        assert_eq!(cfg.model_config().ablation.removed_relations.len(), 1);
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let cfg = RunConfig::parse(
            r#"{"sweep": {"model.node_dim": [8, 16], "training.learning_rate": [0.1, 0.01, 0.001]}}"#,
        )
        .unwrap();
        let grid = cfg.grid().unwrap();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[1].1.model.node_dim, 8);
        assert_eq!(grid[1].1.training.learning_rate, 0.01);
        assert_eq!(grid[5].1.model.node_dim, 16);
        assert!(grid.iter().all(|(_, c)| c.sweep.is_empty()));
    }

    #[test]
    fn bad_sweep_key_is_rejected() {
        let cfg = RunConfig::parse(r#"{"sweep": {"model.width": [1]}}"#).unwrap();
        assert!(cfg.grid().is_err());
    }
}
