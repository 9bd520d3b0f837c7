//! Pipeline-wide settings with the per-stage defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::heatmap::{DEFAULT_MAP_SCALE, DEFAULT_MIN_AREA_PX, DEFAULT_TAU};
use crate::pyramid::{
    TileFormat, DEFAULT_MIN_TISSUE_FRACTION, DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE, DEFAULT_STRIDE,
    DEFAULT_TILE_SIZE,
};

/// The seven skin spindle-cell neoplasm classes shipped as the default label set.
pub const SKIN_CLASSES: [&str; 7] = ["lm", "lms", "df", "dfs", "mfc", "fxa", "cef"];

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_SESSION_CAP_MINUTES: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data_dir: PathBuf,
    pub db_path: PathBuf,
    pub port: u16,
    pub classes: Vec<String>,
    pub tile_size: u32,
    pub overlap: u32,
    pub tile_format: TileFormat,
    pub patch_size: u32,
    pub stride: u32,
    pub min_tissue_fraction: f64,
    pub tau: f64,
    pub min_area_px: f64,
    pub map_scale: f64,
    pub session_cap_minutes: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("gigaslide-data"),
            db_path: PathBuf::from("gigaslide.db"),
            port: DEFAULT_PORT,
            classes: SKIN_CLASSES.iter().map(|s| s.to_string()).collect(),
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
            tile_format: TileFormat::Png,
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_STRIDE,
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
            tau: DEFAULT_TAU,
            min_area_px: DEFAULT_MIN_AREA_PX,
            map_scale: DEFAULT_MAP_SCALE,
            session_cap_minutes: DEFAULT_SESSION_CAP_MINUTES,
        }
    }
}

impl Config {
    /// Checks every numeric field against its documented range.
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.tile_size == 0 {
            problems.push("tile_size must be >= 1".to_string());
        }
        if self.overlap >= self.tile_size {
            problems.push("overlap must be smaller than tile_size".to_string());
        }
        if self.stride == 0 || self.patch_size < self.stride {
            problems.push("need patch_size >= stride >= 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            problems.push("min_tissue_fraction must be in [0, 1]".to_string());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            problems.push("tau must be in (0, 1)".to_string());
        }
        if !(self.min_area_px >= 0.0) {
            problems.push("min_area_px must be >= 0".to_string());
        }
        if !(self.map_scale > 0.0 && self.map_scale <= 1.0) {
            problems.push("map_scale must be in (0, 1]".to_string());
        }
        if !(self.session_cap_minutes > 0.0) {
            problems.push("session_cap_minutes must be > 0".to_string());
        }
        if self.classes.is_empty() {
            problems.push("class set must not be empty".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    pub fn session_cap_ms(&self) -> i64 {
        (self.session_cap_minutes * 60_000.0).round() as i64
    }
}
