//! The run configuration file: one JSON document driving generation,
//! training, evaluation and ablations. Field names mirror the structs;
//! unknown fields are rejected, missing fields take defaults.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::modulation::ModulationConfig;
use crate::scene::{GeneratorConfig, GridSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Observation noise during training and evaluation.
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            grad_clip: 10.0,
            seed: 0,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_dir: String,
    pub val_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    /// Number of perception queries (N).
    pub queries: usize,
    pub decoder: DecoderConfig,
    pub modulation: ModulationConfig,
    pub aggregation: AggregationConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            queries: 64,
            decoder: DecoderConfig::default(),
            modulation: ModulationConfig::default(),
            aggregation: AggregationConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> GridSpec {
        self.generator.grid()
    }

    /// Effective top-k for mask building: clamped to the query count.
    pub fn effective_top_k(&self) -> usize {
        self.modulation.top_k.min(self.queries)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.encoder.validate()?;
        self.modulation.validate()?;
        self.loss.validate()?;
        let c = self.encoder.channels;
        self.decoder.validate(c)?;
        self.aggregation.validate(c)?;
        if self.queries == 0 {
            return Err(Error::Config("need at least one query".into()));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.train.lr)));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let json = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let cfg: RunConfig =
        serde_json::from_str(&json).map_err(|e| Error::json(path.display().to_string(), e))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg).expect("config serialization cannot fail");
    fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn roundtrip_parse_serialize_parse_is_identity() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let json2 = serde_json::to_string(&back).unwrap();
        assert_eq!(json, json2);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let mut cfg = RunConfig::default();
        cfg.queries = 48;
        cfg.train.lr = 1.5e-3;
        save_config(&cfg, &path).unwrap();
        let loaded = load_config(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"queries": 16}"#).unwrap();
        assert_eq!(cfg.queries, 16);
        assert_eq!(cfg.encoder.channels, 64);
        assert_eq!(cfg.decoder.layers, 3);
        assert_eq!(cfg.aggregation.window_sizes, vec![3, 6, 9, 18]);
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.encoder.channels = 60;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn top_k_clamps_to_query_count() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.modulation.top_k, 200);
        assert_eq!(cfg.effective_top_k(), 64);
    }
}
