//! TOML run configuration. Flags override file values, which override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vl_core::distill::{PairParams, TrainConfig};
use vl_core::eval::BenchmarkConfig;
use vl_core::features::FeatureParams;
use vl_core::pipeline::{AugmentationParams, LocalizeParams};
use vl_core::synth::SceneParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Scene directory written by `synth`.
    pub scene: Option<PathBuf>,
    /// Student checkpoint used when `augmentation.mode` is distilled.
    pub student: Option<PathBuf>,
    /// Hidden width of a freshly trained student.
    pub hidden: usize,
    pub synth: SceneParams,
    pub features: FeatureParams,
    pub augmentation: AugmentationParams,
    pub localize: LocalizeParams,
    pub pairs: PairParams,
    pub train: TrainConfig,
    /// Settings of `ablate`.
    pub benchmark: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: None,
            student: None,
            hidden: 64,
            synth: SceneParams::default(),
            features: FeatureParams::default(),
            augmentation: AugmentationParams::default(),
            localize: LocalizeParams::default(),
            pairs: PairParams::default(),
            train: TrainConfig::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    /// Pushes the run seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.localize.ransac.seed = seed;
        self.train.seed = seed;
        self.benchmark = self.benchmark.clone().with_seed(seed);
    }
}
