use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{BenchmarkProtocol, BenchmarkSpec};
use crate::error::{Error, Result};
use crate::evalkit::{GroundTruth, NEGATIVE_RADIUS_M, POSITIVE_RADIUS_M};
use crate::mapstore::MapConfig;
use crate::model::ModelConfig;
use crate::query::make_thresholds;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySettings {
    /// Neighbours retrieved per accepted query.
    pub k: usize,
    /// Rejection threshold on U used by `query`.
    pub threshold: f64,
    /// Half-width and count of the static threshold set.
    pub delta: f64,
    pub count: usize,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self {
            k: 10,
            threshold: 1.0,
            delta: 0.5,
            count: 10,
        }
    }
}

impl QuerySettings {
    pub fn static_thresholds(&self) -> Result<Vec<f64>> {
        Ok(make_thresholds(self.delta, self.count)?.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub positive_radius: f64,
    pub negative_radius: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            positive_radius: POSITIVE_RADIUS_M,
            negative_radius: NEGATIVE_RADIUS_M,
        }
    }
}

impl EvalSettings {
    pub fn ground_truth(
        &self,
        map_positions: Vec<(f64, f64)>,
        query_positions: Vec<(f64, f64)>,
    ) -> GroundTruth {
        GroundTruth {
            positive_radius: self.positive_radius,
            negative_radius: self.negative_radius,
            ..GroundTruth::new(map_positions, query_positions)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSettings {
    /// Output directory used when `--out` is not given.
    pub out: PathBuf,
}

impl Default for PathSettings {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
        }
    }
}

/// Everything a pipeline run needs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds world generation, noise, model initialisation and training.
    pub seed: u64,
    /// Scan geometry, worlds, route and per-traversal noise.
    pub benchmark: BenchmarkSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub map: MapConfig,
    pub query: QuerySettings,
    pub eval: EvalSettings,
    pub paths: PathSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let protocol = BenchmarkProtocol::default();
        Self {
            seed: 0,
            benchmark: BenchmarkSpec::default(),
            model: protocol.model,
            train: protocol.train,
            map: MapConfig::default(),
            query: QuerySettings::default(),
            eval: EvalSettings::default(),
            paths: PathSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Replaces the master seed and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 || self.train.seed > i64::MAX as u64 {
            return Err(Error::config("seeds must fit in a signed 64-bit integer"));
        }
        self.benchmark.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.map.validate()?;
        if self.model.input_side != self.benchmark.geometry.side {
            return Err(Error::config(format!(
                "model input_side {} differs from scan side {}",
                self.model.input_side, self.benchmark.geometry.side
            )));
        }
        if self.query.k == 0 {
            return Err(Error::config("query k must be >= 1"));
        }
        if !(self.query.threshold > 0.0) {
            return Err(Error::config("query threshold must be > 0"));
        }
        self.query.static_thresholds()?;
        self.eval.ground_truth(Vec::new(), Vec::new()).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(
            PipelineConfig::from_toml("").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            PipelineConfig::from_toml("sede = 3"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml("[map]\nradius = 3.0"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "[train]\nlearning_rate = 0.0",
            "[query]\ndelta = 0.0",
            "[eval]\npositive_radius = 60.0",
            "[model]\ninput_side = 32\nconv1_channels = 4\nconv2_channels = 8\nrings = 2\nfeature_dim = 32\nembed_dim = 16",
        ] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn seed_override_reaches_training() {
        let cfg = PipelineConfig::default().with_seed(42);
        assert_eq!((cfg.seed, cfg.train.seed), (42, 42));
    }
}
