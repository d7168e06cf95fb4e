use serde::{Deserialize, Serialize};

use crate::error::{CstError, Result};
use crate::sah_msa::RoundWeighting;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstConfig {
    /// SAHAB counts `(N_1, N_2, N_3)` for the two outer stages and the bottleneck.
    pub blocks: [usize; 3],
    /// Base channel width `C`; stages use `C`, `2C`, `4C`.
    pub channels: usize,
    pub bands: usize,
    /// Patch size `M`.
    pub patch: usize,
    /// Bucket size `m`.
    pub bucket: usize,
    /// Hash rounds `R`.
    pub rounds: usize,
    /// Hash bin width `r`.
    pub hash_width: f64,
    pub head_dim: usize,
    /// Sparsity ratio: fraction of patches screened out of attention.
    pub sigma: f64,
    /// Weight of the sparsity loss.
    pub lambda: f64,
    /// Dispersion shift step in pixels per band.
    pub shift: usize,
    pub weighting: RoundWeighting,
    /// Redraw hash projections every training step instead of fixing them.
    pub resample_hash: bool,
}

impl Default for CstConfig {
    fn default() -> Self {
        CstConfig::cst_m()
    }
}

impl CstConfig {
    fn base(blocks: [usize; 3]) -> Self {
        CstConfig {
            blocks,
            channels: 28,
            bands: 28,
            patch: 16,
            bucket: 64,
            rounds: 2,
            hash_width: 1.0,
            head_dim: 28,
            sigma: 0.5,
            lambda: 2.0,
            shift: 2,
            weighting: RoundWeighting::Normalized,
            resample_hash: false,
        }
    }

    pub fn cst_s() -> Self {
        CstConfig::base([1, 1, 2])
    }

    pub fn cst_m() -> Self {
        CstConfig::base([2, 2, 2])
    }

    pub fn cst_l() -> Self {
        CstConfig::base([2, 4, 6])
    }

    /// CST-L with screening disabled.
    pub fn cst_l_star() -> Self {
        CstConfig {
            sigma: 0.0,
            ..CstConfig::cst_l()
        }
    }

    /// Desk-scale model for 32x32 scenes with 4 bands.
    pub fn micro() -> Self {
        CstConfig {
            blocks: [1, 1, 1],
            channels: 4,
            bands: 4,
            patch: 8,
            bucket: 16,
            head_dim: 4,
            ..CstConfig::base([1, 1, 1])
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name.to_ascii_lowercase().as_str() {
            "cst-s" => CstConfig::cst_s(),
            "cst-m" => CstConfig::cst_m(),
            "cst-l" => CstConfig::cst_l(),
            "cst-l*" | "cst-l-star" => CstConfig::cst_l_star(),
            "micro" => CstConfig::micro(),
            _ => return None,
        })
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels << (stage - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CstError::Config(m));
        if self.channels == 0 || self.bands == 0 {
            return bad("channels and bands must be positive".into());
        }
        if self.patch == 0 || self.bucket == 0 || !(self.patch * self.patch).is_multiple_of(self.bucket) {
            return bad(format!(
                "patch {}x{} cannot be split into buckets of {}",
                self.patch, self.patch, self.bucket
            ));
        }
        if self.rounds == 0 {
            return bad("at least one hash round is required".into());
        }
        if !(self.hash_width > 0.0) {
            return bad(format!("hash width must be positive, got {}", self.hash_width));
        }
        if self.head_dim == 0 || !self.channels.is_multiple_of(self.head_dim) {
            return bad(format!(
                "head dim {} must divide base channels {}",
                self.head_dim, self.channels
            ));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma {} outside [0, 1]", self.sigma));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be nonnegative", self.lambda));
        }
        Ok(())
    }

    /// Spatial sizes must survive two 2x downsamplings with whole patches at
    /// every stage.
    pub fn validate_geometry(&self, height: usize, width: usize) -> Result<()> {
        let unit = 4 * self.patch;
        if height == 0 || width == 0 || !height.is_multiple_of(unit) || !width.is_multiple_of(unit) {
            return Err(CstError::Config(format!(
                "scene {height}x{width} must be a positive multiple of {unit} (4 x patch size)"
            )));
        }
        Ok(())
    }
}
