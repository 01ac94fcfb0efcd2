//! Model hyperparameters and the run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which bidirectional SSM output feeds the token score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    Forward,
    Backward,
    #[default]
    Mean,
}

/// Channel reduction used to turn one token's activations into a score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScoreMetric {
    #[default]
    SoftplusMax,
    L2Norm,
    /// Mean of the `k` largest softplus channel values.
    TopKMean { k: usize },
}

/// Order in which participating layers are folded into the EMA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaOrder {
    #[default]
    ShallowToDeep,
    DeepToShallow,
}

/// Placement of CLS and of the retained coarse tokens in the fine sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// `[imp[..m], CLS, imp[m..], unimportant]` with `m = N'/2`.
    #[default]
    ClsMiddleOfImportant,
    /// `[CLS, imp, unimportant]`
    ClsBeforeImportant,
    /// `[imp, CLS, unimportant]`
    ClsAfterImportant,
    /// `[unimportant, imp[..m], CLS, imp[m..]]`
    UnimportantFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Coarse patch side p₁; must equal `2 * fine_patch`.
    pub coarse_patch: usize,
    pub fine_patch: usize,
    /// Token width D.
    pub dim: usize,
    /// SSM inner width D'.
    pub inner_dim: usize,
    /// State size N per channel.
    pub state_dim: usize,
    pub depth: usize,
    pub num_classes: usize,

    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,

    /// Number of layers taking part in score aggregation, taken from the
    /// last layer backwards in steps of two.
    pub score_layers: usize,
    /// Explicit participating layers; overrides `score_layers` when set.
    pub score_layer_set: Option<Vec<usize>>,
    pub score_direction: ScoreDirection,
    pub score_metric: ScoreMetric,
    pub ema_order: EmaOrder,
    pub order_policy: OrderPolicy,
    pub reuse_enabled: bool,
    pub reuse_mask_unselected: bool,

    /// Standard deviation of the seeded gaussian initialisation.
    pub init_std: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale model: 64×64 input, 4×4 coarse grid, 8×8 fine grid.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            coarse_patch: 16,
            fine_patch: 8,
            dim: 32,
            inner_dim: 64,
            state_dim: 8,
            depth: 4,
            num_classes: 10,
            alpha: 0.8,
            beta: 0.99,
            eta: 0.5,
            score_layers: 12,
            score_layer_set: None,
            score_direction: ScoreDirection::Mean,
            score_metric: ScoreMetric::SoftplusMax,
            ema_order: EmaOrder::ShallowToDeep,
            order_policy: OrderPolicy::ClsMiddleOfImportant,
            reuse_enabled: true,
            reuse_mask_unselected: true,
            init_std: 0.02,
            seed: 0,
        }
    }

    /// Shape of the smallest published backbone (224 input, 32/16 patches,
    /// 24 layers, D = 192). Used for cost-model ratios; never instantiated.
    pub fn vim_tiny() -> Self {
        Self {
            image_size: 224,
            in_channels: 3,
            coarse_patch: 32,
            fine_patch: 16,
            dim: 192,
            inner_dim: 384,
            state_dim: 16,
            depth: 24,
            num_classes: 1000,
            ..Self::tiny()
        }
    }

    /// Coarse grid side H₁.
    pub fn coarse_side(&self) -> usize {
        self.image_size / self.coarse_patch
    }

    /// Fine grid side H₂.
    pub fn fine_side(&self) -> usize {
        self.image_size / self.fine_patch
    }

    /// Number of coarse patches N_c.
    pub fn num_coarse(&self) -> usize {
        self.coarse_side() * self.coarse_side()
    }

    pub fn num_fine(&self) -> usize {
        self.fine_side() * self.fine_side()
    }

    /// Flattened pixel count of one fine patch.
    pub fn patch_len(&self) -> usize {
        self.fine_patch * self.fine_patch * self.in_channels
    }

    /// Layers taking part in score aggregation, deepest first.
    pub fn participating_layers(&self) -> Vec<usize> {
        if let Some(set) = &self.score_layer_set {
            return set.clone();
        }
        (0..self.depth)
            .rev()
            .step_by(2)
            .take(self.score_layers)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fine_patch == 0 || self.coarse_patch != 2 * self.fine_patch {
            return bad(format!(
                "coarse_patch ({}) must be exactly twice fine_patch ({})",
                self.coarse_patch, self.fine_patch
            ));
        }
        if self.image_size == 0 || self.image_size % self.coarse_patch != 0 {
            return bad(format!(
                "image_size ({}) must be a positive multiple of coarse_patch ({})",
                self.image_size, self.coarse_patch
            ));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("eta", self.eta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is outside [0, 1]"));
            }
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("dim", self.dim),
            ("inner_dim", self.inner_dim),
            ("state_dim", self.state_dim),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!("init_std must be finite and non-negative, got {}", self.init_std));
        }
        if let Some(set) = &self.score_layer_set {
            if let Some(&l) = set.iter().find(|&&l| l >= self.depth) {
                return bad(format!("score layer {l} out of range for depth {}", self.depth));
            }
        }
        if let ScoreMetric::TopKMean { k } = self.score_metric {
            if k == 0 || k > self.inner_dim {
                return bad(format!("top-k metric needs 1 <= k <= inner_dim, got {k}"));
            }
        }
        Ok(())
    }
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub samples: usize,
    /// Upper bound of the checkerboard amplitude marking the class cell.
    pub amplitude: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            samples: 64,
            amplitude: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub path: Option<PathBuf>,
}

/// Top-level TOML document: `[model]`, `[data]`, `[output]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.num_classes > 16 {
            return Err(Error::Config(format!(
                "synthetic data supports at most 16 classes, got {}",
                self.model.num_classes
            )));
        }
        if self.model.num_classes > self.model.num_coarse() {
            return Err(Error::Config(format!(
                "num_classes ({}) exceeds the number of coarse cells ({})",
                self.model.num_classes,
                self.model.num_coarse()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_valid() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::vim_tiny().validate().unwrap();
        assert_eq!(ModelConfig::tiny().num_coarse(), 16);
        assert_eq!(ModelConfig::vim_tiny().num_coarse(), 49);
    }

    #[test]
    fn rejects_bad_patch_ratio() {
        let cfg = ModelConfig {
            coarse_patch: 12,
            ..ModelConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_out_of_range_knobs() {
        for cfg in [
            ModelConfig { eta: 1.5, ..ModelConfig::tiny() },
            ModelConfig { alpha: -0.1, ..ModelConfig::tiny() },
            ModelConfig { beta: 2.0, ..ModelConfig::tiny() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn default_layer_set_is_every_second_from_last() {
        assert_eq!(ModelConfig::tiny().participating_layers(), vec![3, 1]);
        let vim = ModelConfig::vim_tiny();
        let layers = vim.participating_layers();
        assert_eq!(layers.len(), 12);
        assert_eq!(layers[0], 23);
        assert_eq!(*layers.last().unwrap(), 1);
    }

    #[test]
    fn parses_toml_sections() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [model]
            eta = 0.7
            depth = 2
            order_policy = "cls_before_important"
            score_metric = { kind = "top_k_mean", k = 4 }

            [data]
            samples = 8
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.eta, 0.7);
        assert_eq!(cfg.model.depth, 2);
        assert_eq!(cfg.model.order_policy, OrderPolicy::ClsBeforeImportant);
        assert_eq!(cfg.model.score_metric, ScoreMetric::TopKMean { k: 4 });
        assert_eq!(cfg.data.samples, 8);
        assert_eq!(cfg.model.dim, 32);
    }

    #[test]
    fn toml_validation_and_unknown_keys() {
        assert!(RunConfig::from_toml_str("[model]\neta = 3.0\n").is_err());
        assert!(RunConfig::from_toml_str("[model]\nbogus = 1\n").is_err());
    }
}
