use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gigaslide_core::pyramid::TileFormat;
use gigaslide_core::Config;

#[derive(Debug, Parser)]
#[command(name = "gigaslide", version, about = "Whole-slide image annotation platform")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by every command. Precedence: flag, then environment
/// (`GIGASLIDE_DB`, `GIGASLIDE_DATA`, `GIGASLIDE_PORT`), then `--config`
/// file, then built-in defaults.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with any subset of the configuration keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub db: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    /// Comma-separated slide-level class set.
    #[arg(long, global = true, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub tile_size: Option<u32>,
    #[arg(long, global = true)]
    pub overlap: Option<u32>,
    #[arg(long, global = true)]
    pub tile_format: Option<FormatArg>,
    #[arg(long, global = true)]
    pub patch_size: Option<u32>,
    #[arg(long, global = true)]
    pub stride: Option<u32>,
    #[arg(long, global = true)]
    pub min_tissue_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    #[arg(long, global = true)]
    pub min_area_px: Option<f64>,
    #[arg(long, global = true)]
    pub map_scale: Option<f64>,
    #[arg(long, global = true)]
    pub session_cap_minutes: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Png,
    Jpeg,
}

impl From<FormatArg> for TileFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Png => TileFormat::Png,
            FormatArg::Jpeg => TileFormat::Jpeg,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tile pyramid and patch grid for an image and register it.
    Ingest {
        image: PathBuf,
        #[arg(long)]
        name: String,
        /// Magnification the image was scanned at.
        #[arg(long, default_value_t = 1.0)]
        scan_mag: f64,
        /// Working magnification; defaults to the scan magnification.
        #[arg(long)]
        target_mag: Option<f64>,
        /// Replace an existing slide of the same name.
        #[arg(long)]
        force: bool,
    },
    /// Turn patch probabilities into pending region proposals.
    #[command(group = clap::ArgGroup::new("source").required(true).args(["model", "predictions"]))]
    Predict {
        slide: String,
        /// Trained model file; scores every kept patch of the slide.
        #[arg(long)]
        model: Option<PathBuf>,
        /// `slide,x,y,prob` file.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write the scored patches here.
        #[arg(long)]
        save_predictions: Option<PathBuf>,
    },
    /// Train teacher then student and write the model.
    Train {
        /// CSV with `label,f0,f1,...` feature rows or `path,label` image rows.
        #[arg(long)]
        labeled: PathBuf,
        /// Same layout without the label column.
        #[arg(long)]
        unlabeled: PathBuf,
        /// Held-out set scored for the report; the labeled set otherwise.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Create, assign or list batches.
    Batch {
        #[command(subcommand)]
        action: BatchAction,
    },
    /// Write a report document as JSON.
    Report {
        /// agreement, confusion, timing, batch_comparison or overlap.
        kind: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        batch: Option<String>,
        #[arg(long)]
        annotator: Option<String>,
        /// Timing grouping: class, annotator or slide.
        #[arg(long)]
        group_by: Option<String>,
    },
    /// Serve the HTTP API.
    Serve,
    /// Manage users and their API tokens.
    User {
        #[command(subcommand)]
        action: UserAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum BatchAction {
    Create {
        name: String,
        /// Comma-separated slide names, in display order.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        slides: Vec<String>,
        /// Every assigned annotator labels every slide.
        #[arg(long)]
        dense: bool,
    },
    Assign {
        name: String,
        #[arg(long, value_delimiter = ',', required = true)]
        users: Vec<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum UserAction {
    /// Register a user and print the token.
    Add {
        name: String,
        #[arg(long, value_enum, default_value_t = RoleArg::Annotator)]
        role: RoleArg,
    },
    List,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Expert,
    Annotator,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

impl GlobalArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => Config::default(),
        };
        if let Some(v) = env_var("GIGASLIDE_DB") {
            cfg.db_path = v.into();
        }
        if let Some(v) = env_var("GIGASLIDE_DATA") {
            cfg.data_dir = v.into();
        }
        if let Some(v) = env_var("GIGASLIDE_PORT") {
            cfg.port = v.parse().with_context(|| format!("GIGASLIDE_PORT={v} is not a port"))?;
        }

        macro_rules! flag {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v.into();
                }
            };
        }
        flag!(port);
        flag!(classes);
        flag!(tile_size);
        flag!(overlap);
        flag!(tile_format);
        flag!(patch_size);
        flag!(stride);
        flag!(min_tissue_fraction);
        flag!(tau);
        flag!(min_area_px);
        flag!(map_scale);
        flag!(session_cap_minutes);
        if let Some(v) = &self.db {
            cfg.db_path = v.clone();
        }
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        cfg.validate().map_err(|e| anyhow::anyhow!("invalid configuration: {e}"))?;
        Ok(cfg)
    }
}
