//! Run configuration, persisted as TOML next to every output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::OracleConfig;
use crate::eval::{MatchParams, DEFAULT_TOP_K_LIST};
use crate::filter::DEFAULT_THRESHOLD;
use crate::locator::DEFAULT_DEDUPE_RADIUS;
use crate::ranker::{DEFAULT_ASSOCIATION_RADIUS, DEFAULT_SIGMA, DEFAULT_TOP_K};
use crate::tiler::DEFAULT_PAD_FILL;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("unsupported config format_version {0} (expected {CONFIG_FORMAT_VERSION})")]
    Version(u32),
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub tile_w: u32,
    pub tile_h: u32,
    pub overlap_x: u32,
    pub overlap_y: u32,
    pub pad_fill: u8,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            tile_w: 608,
            tile_h: 608,
            overlap_x: 0,
            overlap_y: 0,
            pad_fill: DEFAULT_PAD_FILL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { from: 0.0, to: 1.0, step: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub format_version: u32,
    pub seed: u64,
    pub tiling: TilingConfig,
    pub threshold: f64,
    pub sigma: f64,
    pub top_k: usize,
    pub top_k_report: Vec<usize>,
    pub dedupe_radius_px: f64,
    pub matching: MatchParams,
    pub association_radius_px: f64,
    /// Altitude band edges for the band report, metres.
    pub band_edges_m: Vec<f64>,
    pub sweep: SweepConfig,
    pub oracle: OracleConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 42,
            tiling: TilingConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            sigma: DEFAULT_SIGMA,
            top_k: DEFAULT_TOP_K,
            top_k_report: DEFAULT_TOP_K_LIST.to_vec(),
            dedupe_radius_px: DEFAULT_DEDUPE_RADIUS,
            matching: MatchParams::default(),
            association_radius_px: DEFAULT_ASSOCIATION_RADIUS,
            band_edges_m: vec![60.0, 80.0, 100.0, 120.0, 140.0, 160.0, 180.0, 200.0, 220.0],
            sweep: SweepConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(ConfigError::Version(self.format_version));
        }
        let t = &self.tiling;
        if t.tile_w == 0 || t.tile_h == 0 {
            return bad(format!("tile size {}x{} must be positive", t.tile_w, t.tile_h));
        }
        if t.overlap_x >= t.tile_w || t.overlap_y >= t.tile_h {
            return bad(format!("overlap ({}, {}) must be smaller than the tile", t.overlap_x, t.overlap_y));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(self.dedupe_radius_px >= 0.0) || !(self.association_radius_px > 0.0) || !(self.matching.epsilon > 0.0) {
            return bad("radii must be positive".into());
        }
        let s = &self.sweep;
        if !(0.0 <= s.from && s.from <= s.to && s.to <= 1.0 && s.step > 0.0) {
            return bad(format!("sweep {}..{} step {} is not a valid grid in [0, 1]", s.from, s.to, s.step));
        }
        if self.band_edges_m.len() < 2 || self.band_edges_m.windows(2).any(|w| w[0] >= w[1]) {
            return bad("band_edges_m must be strictly increasing".into());
        }
        self.oracle.validate().map_err(ConfigError::Invalid)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml()).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
