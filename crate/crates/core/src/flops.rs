//! Analytic compute cost of each inference stage.
//!
//! One FLOP is half a multiply-accumulate; elementwise nonlinearities,
//! residual adds and bias adds count one FLOP per element. Only ratios are
//! meant to be compared against published numbers.

use crate::config::ModelConfig;
use crate::geometry::fine_count;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Coarse,
    /// Fine stage; `reuse` adds the coarse-feature MLP and fusion.
    Fine { reuse: bool },
}

/// Per-op coefficients for one model shape.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub dim: u64,
    pub inner: u64,
    pub state: u64,
    pub depth: u64,
    pub classes: u64,
    pub patch_len: u64,
    pub image_pixels: u64,
    pub num_coarse: u64,
}

impl CostModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            dim: cfg.dim as u64,
            inner: cfg.inner_dim as u64,
            state: cfg.state_dim as u64,
            depth: cfg.depth as u64,
            classes: cfg.num_classes as u64,
            patch_len: cfg.patch_len() as u64,
            image_pixels: (cfg.in_channels * cfg.image_size * cfg.image_size) as u64,
            num_coarse: cfg.num_coarse() as u64,
        }
    }

    /// Multiply-accumulates of one block per token.
    pub fn block_macs_per_token(&self) -> u64 {
        let (d, di, n) = (self.dim, self.inner, self.state);
        let in_proj = d * 2 * di;
        let ssm_proj = 2 * (di * di + 2 * di * n);
        let scan = 2 * 3 * di * n;
        let gates = 2 * di * di;
        let out_proj = di * d;
        in_proj + ssm_proj + scan + gates + out_proj
    }

    /// Elementwise work of one block per token: softplus on Δ, exp for ā,
    /// sigmoid gates, gate products, direction sum, residual.
    pub fn block_elementwise_per_token(&self) -> u64 {
        let (d, di, n) = (self.dim, self.inner, self.state);
        2 * di + 2 * di * n + 2 * di + 2 * di + di + d
    }

    /// FLOPs of one block over `len` tokens.
    pub fn block(&self, len: u64) -> u64 {
        len * (2 * self.block_macs_per_token() + self.block_elementwise_per_token())
    }

    /// Patch embedding of the tokens a stage computes, plus the positional add
    /// over the `len`-token sequence.
    pub fn embed(&self, kind: StageKind, len: u64) -> u64 {
        let patches = match kind {
            StageKind::Coarse => self.num_coarse,
            StageKind::Fine { .. } => 4 * self.num_coarse,
        };
        let pool = match kind {
            StageKind::Coarse => self.image_pixels,
            StageKind::Fine { .. } => 0,
        };
        2 * patches * self.patch_len * self.dim + pool + len * self.dim
    }

    /// Linear head on CLS, bias, softmax.
    pub fn head(&self) -> u64 {
        2 * self.dim * self.classes + 2 * self.classes
    }

    /// Reuse MLP over all coarse tokens plus fusion into `len` tokens.
    pub fn reuse(&self, len: u64) -> u64 {
        let d = self.dim;
        self.num_coarse * (2 * 2 * d * d + 3 * d) + len * d
    }

    pub fn stage(&self, kind: StageKind, len: u64) -> u64 {
        let reuse = match kind {
            StageKind::Fine { reuse: true } => self.reuse(len),
            _ => 0,
        };
        self.embed(kind, len) + self.depth * self.block(len) + self.head() + reuse
    }
}

/// FLOPs of one stage over a `len`-token sequence (CLS included).
pub fn stage_flops(cfg: &ModelConfig, kind: StageKind, len: usize) -> u64 {
    assert!(len >= 1, "stage length must be positive");
    CostModel::new(cfg).stage(kind, len as u64)
}

pub fn coarse_flops(cfg: &ModelConfig) -> u64 {
    stage_flops(cfg, StageKind::Coarse, cfg.num_coarse() + 1)
}

/// Fine-stage cost at refinement ratio `alpha`.
pub fn fine_flops(cfg: &ModelConfig, alpha: f64) -> u64 {
    let len = fine_count(alpha, cfg.num_coarse()) + 1;
    stage_flops(cfg, StageKind::Fine { reuse: cfg.reuse_enabled }, len)
}

/// Mean of realised per-image costs.
pub fn expected_flops(per_image: &[u64]) -> f64 {
    if per_image.is_empty() {
        return 0.0;
    }
    per_image.iter().map(|&f| f as f64).sum::<f64>() / per_image.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_in_length() {
        let cfg = ModelConfig::tiny();
        for l in [1, 5, 17, 65] {
            let one = stage_flops(&cfg, StageKind::Coarse, l);
            let two = stage_flops(&cfg, StageKind::Coarse, 2 * l);
            assert!((two as f64) < 2.05 * one as f64);
            assert!(two > one);
        }
    }

    #[test]
    fn coarse_to_fine_ratio_matches_published_shape() {
        let cfg = ModelConfig::vim_tiny();
        let ratio = stage_flops(&cfg, StageKind::Coarse, 50) as f64
            / stage_flops(&cfg, StageKind::Fine { reuse: false }, 197) as f64;
        assert!((0.24..=0.30).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn alpha_sweep_strictly_increasing() {
        let cfg = ModelConfig::vim_tiny();
        let n = cfg.num_coarse();
        let costs: Vec<u64> = (0..=n).map(|k| fine_flops(&cfg, k as f64 / n as f64)).collect();
        assert!(costs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn expected_flops_cases() {
        let cfg = ModelConfig::tiny();
        let c = coarse_flops(&cfg);
        let f = c + fine_flops(&cfg, cfg.alpha);
        assert_eq!(expected_flops(&[c; 8]), c as f64);
        assert_eq!(expected_flops(&[f; 8]), f as f64);
        assert_eq!(expected_flops(&[c, f, c, f]), (c + f) as f64 / 2.0);
        assert_eq!(expected_flops(&[]), 0.0);
    }
}
