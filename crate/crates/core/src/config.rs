//! Run configuration, loaded from TOML.
//!
//! Every key has a default; a file only needs the keys it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ascb::DistanceGroupSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training crop `[height, width]`; both divisible by 32.
    pub crop: [usize; 2],
    pub learning_rate: f64,
    /// Power `p` of the polynomial learning-rate decay.
    pub decay_power: f64,
    pub batch_size: usize,
    /// Total optimiser steps `T`.
    pub iterations: usize,
    /// Weight of the Chamfer term in the total loss.
    pub alpha: f64,
    pub seed: u64,
    pub max_depth: f64,
    pub horizontal_flip: bool,
    pub model: ModelConfig,
    pub upsampler: UpsamplerConfig,
    pub ascb: AscbConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            crop: [64, 128],
            learning_rate: 1e-4,
            decay_power: 0.9,
            batch_size: 6,
            iterations: 200,
            alpha: 1.0,
            seed: 0,
            max_depth: 80.0,
            horizontal_flip: true,
            model: ModelConfig::default(),
            upsampler: UpsamplerConfig::default(),
            ascb: AscbConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Image pyramid widths `C_1..C_5`.
    pub image_channels: Vec<usize>,
    /// Radar pyramid widths `C_1..C_5`.
    pub radar_channels: Vec<usize>,
    /// EdgeConv stage widths `C_1′..C_5′`.
    pub gnn_channels: Vec<usize>,
    /// Point feature width `C` of `f_3d`, `f_agg^G` and the upsampled features.
    pub point_channels: usize,
    /// Decoder widths, full resolution first, then levels 1..5.
    pub decoder_channels: Vec<usize>,
    /// Radar projection map channels: depth, v_x, v_z, RCS.
    pub radar_map_channels: usize,
    pub k: usize,
    pub leaky_slope: f64,
    pub gnn_variant: GnnVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_channels: vec![16, 32, 64, 128, 256],
            radar_channels: vec![8, 16, 32, 64, 128],
            gnn_channels: vec![32, 32, 64, 64, 64],
            point_channels: 64,
            decoder_channels: vec![16, 16, 32, 64, 64, 128],
            radar_map_channels: 4,
            k: 4,
            leaky_slope: 0.2,
            gnn_variant: GnnVariant::Attention,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnVariant {
    /// EdgeConv blocks each followed by cross-attention with a skip.
    Attention,
    /// Plain EdgeConv stack, no cross-attention.
    Dgcnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpsamplerConfig {
    /// Target point count `N_L`.
    pub n_l: usize,
    /// Per-unit rate `τ`.
    pub tau: usize,
    /// Number of upsample units `n_u`.
    pub n_units: usize,
    /// Length of the transposed-convolution kernel along the point axis.
    pub deconv_taps: usize,
    /// Sort points by depth before the reshape interpolation.
    pub depth_sorted: bool,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            n_l: 128,
            tau: 2,
            n_units: 2,
            deconv_taps: 4,
            depth_sorted: false,
        }
    }
}

impl UpsamplerConfig {
    /// Point count after the reshape block, `N_L / τ^{n_u}`.
    pub fn base_points(&self) -> usize {
        self.n_l / self.tau.pow(self.n_units as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_l == 0 || self.n_units == 0 {
            return Err(Error::Config("N_L and n_units must be positive".into()));
        }
        if self.tau < 2 {
            return Err(Error::Config(format!("tau must be ≥ 2, got {}", self.tau)));
        }
        let div = self
            .tau
            .checked_pow(self.n_units as u32)
            .ok_or_else(|| Error::Config("tau^n_units overflows".into()))?;
        if !self.n_l.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "N_L={} not divisible by tau^n_units={div}",
                self.n_l
            )));
        }
        if self.deconv_taps < self.tau || !(self.deconv_taps - self.tau).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "deconv_taps={} must be tau plus an even margin",
                self.deconv_taps
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AscbConfig {
    pub groups: DistanceGroupSpec,
    /// Kernel schedule of the single-mask block used by `conventional_sparse`.
    pub conventional_kernels: Vec<usize>,
    /// Learnable kernels (initialised to box filters) or fixed box filters.
    pub learnable: bool,
}

impl Default for AscbConfig {
    fn default() -> Self {
        Self {
            groups: DistanceGroupSpec::default(),
            conventional_kernels: vec![11, 7, 5, 3, 3],
            learnable: true,
        }
    }
}

/// Ablation switches; all combinations are valid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Feed the raw radar map to the encoder.
    pub no_ascb: bool,
    /// One observation mask with `conventional_kernels` instead of the groups.
    pub conventional_sparse: bool,
    /// Replace the dynamic-graph network with a per-point MLP.
    pub no_gnn: bool,
    /// Drop the upsampling branch and its loss.
    pub no_upsample: bool,
}

impl Ablation {
    /// Tag used in output file names, e.g. `no_gnn-no_upsample`; `full` when
    /// nothing is ablated.
    pub fn tag(&self, variant: GnnVariant) -> String {
        let mut parts = Vec::new();
        if self.no_ascb {
            parts.push("no_ascb");
        }
        if self.conventional_sparse {
            parts.push("conventional_sparse");
        }
        if self.no_gnn {
            parts.push("no_gnn");
        }
        if self.no_upsample {
            parts.push("no_upsample");
        }
        if variant == GnnVariant::Dgcnn && !self.no_gnn {
            parts.push("dgcnn");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("-")
        }
    }

    /// Parses a comma-separated flag list such as `no_gnn,no_upsample`.
    pub fn parse_flags(list: &str) -> Result<Self> {
        let mut a = Self::default();
        for flag in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match flag {
                "no_ascb" => a.no_ascb = true,
                "conventional_sparse" => a.conventional_sparse = true,
                "no_gnn" => a.no_gnn = true,
                "no_upsample" => a.no_upsample = true,
                other => return Err(Error::Config(format!("unknown ablation flag {other}"))),
            }
        }
        Ok(a)
    }
}

impl RunConfig {
    /// Defaults with a full-size 352×704 crop.
    pub fn full_resolution() -> Self {
        Self {
            crop: [352, 704],
            ..Self::default()
        }
    }

    pub fn tag(&self) -> String {
        self.ablation.tag(self.model.gnn_variant)
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.crop;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("crop {h}×{w} must be positive multiples of 32")));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_power >= 0.0) {
            return Err(Error::Config("learning rate and decay power".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.max_depth > 0.0) {
            return Err(Error::Config("max_depth must be positive".into()));
        }
        let m = &self.model;
        for (name, list, len) in [
            ("image_channels", &m.image_channels, 5),
            ("radar_channels", &m.radar_channels, 5),
            ("gnn_channels", &m.gnn_channels, 5),
            ("decoder_channels", &m.decoder_channels, 6),
        ] {
            if list.len() != len || list.contains(&0) {
                return Err(Error::Config(format!("{name} needs {len} positive widths")));
            }
        }
        if m.point_channels == 0 || m.radar_map_channels == 0 {
            return Err(Error::Config("point and radar map widths must be positive".into()));
        }
        if m.k == 0 {
            return Err(Error::Config("k must be ≥ 1".into()));
        }
        self.upsampler.validate()?;
        self.ascb.groups.validate()?;
        crate::ascb::validate_schedule(&self.ascb.conventional_kernels)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
