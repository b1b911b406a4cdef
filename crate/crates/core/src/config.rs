//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelConfig, Preset, Scenario, ScenarioConfig, TokenPath};
use crate::optim::AdamConfig;
use crate::scm::FusionMode;
use crate::sketch::LabelSpace;

/// Optional changes on top of a preset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub width: Option<usize>,
    pub layers: Option<usize>,
    pub attention_heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub max_strokes: Option<usize>,
    pub knn_k: Option<usize>,
    pub memory_heads: Option<usize>,
    pub tau: Option<f64>,
    pub epsilon: Option<f64>,
}

/// Ends training early once the train set reaches these levels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopRule {
    pub train_acc_at_1: Option<f64>,
    pub train_c_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_data: PathBuf,
    #[serde(default)]
    pub test_data: Option<PathBuf>,
    pub label_space: PathBuf,
    pub scenario: Scenario,
    #[serde(default = "default_fusion")]
    pub fusion: FusionMode,
    #[serde(default)]
    pub token_path: Option<TokenPath>,
    #[serde(default = "default_preset")]
    pub preset: Preset,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to 300 (desk) or 200 (full).
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Defaults to 16 (desk) or 128 (full).
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub weights: LossWeights,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub stop: StopRule,
    /// Evaluate the train set after every epoch.
    #[serde(default = "default_true")]
    pub eval_train: bool,
}

fn default_fusion() -> FusionMode {
    FusionMode::Convex
}

fn default_preset() -> Preset {
    Preset::Desk
}

fn default_true() -> bool {
    true
}

/// Everything the optimisation loop needs, independent of files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub stop: StopRule,
    pub eval_train: bool,
}

impl TrainSettings {
    /// Preset defaults for the given label space.
    pub fn new(
        preset: Preset,
        scenario: ScenarioConfig,
        label_space: &LabelSpace,
        seed: u64,
    ) -> Self {
        let (epochs, batch_size) = match preset {
            Preset::Desk => (300, 16),
            Preset::Full => (200, 128),
        };
        Self {
            model: ModelConfig::preset(
                preset,
                label_space.num_categories(),
                label_space.num_components(),
            ),
            scenario,
            seed,
            epochs,
            batch_size,
            adam: AdamConfig::default(),
            stop: StopRule::default(),
            eval_train: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.model.width % 2 != 0 {
            return Err(Error::Config("width must be even".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        // Relative paths are relative to the config file.
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut cfg.train_data);
            fix(&mut cfg.label_space);
            fix(&mut cfg.output_dir);
            if let Some(t) = cfg.test_data.as_mut() {
                fix(t);
            }
        }
        Ok(cfg)
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            scenario: self.scenario,
            fusion: self.fusion,
            token_path: self.token_path,
            weights: self.weights,
        }
    }

    pub fn settings(&self, label_space: &LabelSpace) -> Result<TrainSettings> {
        let mut s = TrainSettings::new(self.preset, self.scenario_config(), label_space, self.seed);
        let o = &self.model;
        let m = &mut s.model;
        m.width = o.width.unwrap_or(m.width);
        m.layers = o.layers.unwrap_or(m.layers);
        m.attention_heads = o.attention_heads.unwrap_or(m.attention_heads);
        m.mlp_ratio = o.mlp_ratio.unwrap_or(m.mlp_ratio);
        m.max_strokes = o.max_strokes.unwrap_or(m.max_strokes);
        m.knn_k = o.knn_k.unwrap_or(m.knn_k);
        m.memory_heads = o.memory_heads.unwrap_or(m.memory_heads);
        m.kernel.tau = o.tau.unwrap_or(m.kernel.tau);
        m.kernel.epsilon = o.epsilon.unwrap_or(m.kernel.epsilon);
        s.epochs = self.epochs.unwrap_or(s.epochs);
        s.batch_size = self.batch_size.unwrap_or(s.batch_size);
        s.adam = self.adam;
        s.stop = self.stop;
        s.eval_train = self.eval_train;
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> LabelSpace {
        LabelSpace::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![vec![true, false], vec![false, true]],
        )
        .unwrap()
    }

    #[test]
    fn minimal_config_uses_desk_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            train_data = "train.jsonl"
            label_space = "labels.json"
            scenario = "labels_full"
            output_dir = "out"
            "#,
        )
        .unwrap();
        let s = cfg.settings(&space()).unwrap();
        assert_eq!((s.epochs, s.batch_size, s.model.width), (300, 16, 64));
        assert_eq!(s.adam.learning_rate, 3e-4);
        assert_eq!(s.scenario.fusion, FusionMode::Convex);
    }

    #[test]
    fn full_preset_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            train_data = "t"
            label_space = "l"
            scenario = "prior_info"
            preset = "full"
            output_dir = "o"
            "#,
        )
        .unwrap();
        let s = cfg.settings(&space()).unwrap();
        assert_eq!(
            (s.epochs, s.batch_size, s.model.width, s.model.layers),
            (200, 128, 768, 12)
        );
    }

    #[test]
    fn overrides_and_rejections() {
        let cfg = RunConfig::from_toml(
            r#"
            train_data = "t"
            label_space = "l"
            scenario = "category_only"
            token_path = "component"
            fusion = "strokes_only"
            output_dir = "o"
            epochs = 3
            [model]
            width = 16
            layers = 1
            [weights]
            composition = 2.0
            "#,
        )
        .unwrap();
        let s = cfg.settings(&space()).unwrap();
        assert_eq!((s.epochs, s.model.width, s.model.layers), (3, 16, 1));
        assert_eq!(s.scenario.weights.composition, 2.0);
        assert_eq!(s.scenario.weights.assignment, 20.0);

        assert!(RunConfig::from_toml("train_data = 1").is_err());
        let mut bad = cfg.clone();
        bad.fusion = FusionMode::KeysOnly;
        assert!(bad.settings(&space()).is_err());
        assert!(RunConfig::from_toml(
            r#"
            train_data = "t"
            label_space = "l"
            scenario = "labels_full"
            output_dir = "o"
            unknown_key = 1
            "#
        )
        .is_err());
    }
}
