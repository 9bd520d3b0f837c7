//! Slide ingestion and the prediction → proposal pipeline, shared by the HTTP
//! service and the command line.

use std::fs;
use std::path::{Path, PathBuf};

use gigaslide_core::heatmap::{heatmap_regions, interpolate, HeatmapError, PatchPrediction, RegionPolygon};
use gigaslide_core::pyramid::{
    build_pyramid, downsample_to_working_resolution, extract_patch_grid, tissue_mask, PatchGrid, PyramidError,
    TileFormat,
};
use gigaslide_core::semisup::{predict_patches, ColorStatsFeatures, FeatureExtractor, ModelFile, SemisupError};
use gigaslide_core::Config;
use gigaslide_store::{SlideRecord, Store, StoreError};
use image::RgbImage;
use thiserror::Error;

/// Label carried by every model proposal.
pub const PROPOSAL_LABEL: &str = "tumor";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Semisup(#[from] SemisupError),
    #[error("cannot read image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed prediction file: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Slide names become file names and URL segments.
pub fn validate_slide_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.')
        && !name.ends_with("_files");
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!(
            "slide name {name:?} must be 1-128 characters of [A-Za-z0-9._-], not start with '.' nor end in _files"
        )))
    }
}

pub fn pyramid_root(config: &Config) -> PathBuf {
    config.data_dir.join("pyramids")
}

pub fn working_image_path(config: &Config, slide: &str) -> PathBuf {
    config.data_dir.join("working").join(format!("{slide}.png"))
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub scan_magnification: f64,
    pub target_magnification: f64,
    /// Rebuild and replace an already registered slide.
    pub force: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            scan_magnification: 1.0,
            target_magnification: 1.0,
            force: false,
        }
    }
}

/// Reads an image file and ingests it under `slide_name`.
pub fn ingest_file(store: &Store, config: &Config, source: &Path, slide_name: &str, opts: IngestOptions) -> Result<SlideRecord> {
    validate_slide_name(slide_name)?;
    if !opts.force && store.slide(slide_name).is_ok() {
        return Err(StoreError::Conflict(format!("slide {slide_name} already exists")).into());
    }
    let img = image::open(source)
        .map_err(|e| PipelineError::Image {
            path: source.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    ingest_image(store, config, &img, slide_name, opts)
}

/// Downsamples to working resolution, writes the tile pyramid and working
/// raster, computes the tissue mask and patch grid, and registers the slide.
pub fn ingest_image(store: &Store, config: &Config, source: &RgbImage, slide_name: &str, opts: IngestOptions) -> Result<SlideRecord> {
    validate_slide_name(slide_name)?;
    if !opts.force && store.slide(slide_name).is_ok() {
        return Err(StoreError::Conflict(format!("slide {slide_name} already exists")).into());
    }
    let (working, scale_factor) =
        downsample_to_working_resolution(source, opts.scan_magnification, opts.target_magnification)?;

    let root = pyramid_root(config);
    let files_dir = root.join(format!("{slide_name}_files"));
    if files_dir.exists() {
        // Stale tiles from a differently sized earlier build would linger.
        fs::remove_dir_all(&files_dir).map_err(io_err(&files_dir))?;
    }
    let desc = build_pyramid(&working, slide_name, &root, config.tile_size, config.overlap, config.tile_format)?;

    let working_path = working_image_path(config, slide_name);
    if let Some(dir) = working_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    working.save(&working_path).map_err(|e| PipelineError::Image {
        path: working_path.clone(),
        source: e,
    })?;

    let mask = tissue_mask(&working);
    if mask.degenerate {
        log::warn!("slide {slide_name}: flat magenta histogram, no tissue detected");
    }
    let grid = extract_patch_grid(&mask, config.patch_size, config.stride, config.min_tissue_fraction)?;
    let record = SlideRecord {
        name: slide_name.to_string(),
        width: desc.width,
        height: desc.height,
        scale_factor,
        pyramid_dir: root.to_string_lossy().into_owned(),
        tile_size: desc.tile_size,
        overlap: desc.overlap,
        tile_format: desc.format.extension().to_string(),
        patch_grid: serde_json::to_string(&grid).map_err(|e| PipelineError::Invalid(e.to_string()))?,
    };
    store.register_slide(&record, opts.force)?;
    Ok(record)
}

pub fn slide_grid(record: &SlideRecord) -> Result<PatchGrid> {
    serde_json::from_str(&record.patch_grid)
        .map_err(|e| PipelineError::Invalid(format!("slide {} has an unreadable patch grid: {e}", record.name)))
}

pub fn slide_format(record: &SlideRecord) -> Result<TileFormat> {
    TileFormat::from_extension(&record.tile_format)
        .ok_or_else(|| PipelineError::Invalid(format!("unknown tile format {}", record.tile_format)))
}

#[derive(serde::Deserialize)]
struct PredictionRow {
    slide: String,
    x: u32,
    y: u32,
    prob: f64,
}

/// Parses `slide,x,y,prob` text. When `slide` is given, every row must name
/// it. Errors cite 1-based line numbers, header included.
pub fn parse_predictions(text: &str, slide: Option<&str>) -> Result<Vec<PatchPrediction>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| PipelineError::Format(e.to_string()))?.clone();
    let expected = ["slide", "x", "y", "prob"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(PipelineError::Format(format!(
            "header must be slide,x,y,prob, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| PipelineError::Format(format!("line {line}: {e}")))?;
        if let Some(s) = slide {
            if row.slide != s {
                return Err(PipelineError::Invalid(format!(
                    "line {line} names slide {}, expected {s}",
                    row.slide
                )));
            }
        }
        if !(0.0..=1.0).contains(&row.prob) {
            return Err(PipelineError::Invalid(format!(
                "line {line}: probability {} outside [0, 1]",
                row.prob
            )));
        }
        out.push(PatchPrediction {
            slide_name: row.slide,
            x: row.x,
            y: row.y,
            prob: row.prob,
        });
    }
    Ok(out)
}

pub fn format_predictions(predictions: &[PatchPrediction]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["slide", "x", "y", "prob"]).expect("in-memory write");
    for p in predictions {
        w.write_record([p.slide_name.clone(), p.x.to_string(), p.y.to_string(), p.prob.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

/// Rejects predictions that do not sit on the slide's patch grid, listing
/// the offending 1-based file lines.
pub fn check_on_grid(predictions: &[PatchPrediction], grid: &PatchGrid) -> Result<()> {
    let bad: Vec<String> = predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| grid.cell_of(p.x, p.y).is_none())
        .map(|(i, p)| format!("line {} ({}, {})", i + 2, p.x, p.y))
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(PipelineError::Invalid(format!("predictions off the patch grid: {}", bad.join(", "))))
    }
}

/// Scores every kept patch of an ingested slide with a trained model.
pub fn predict_with_model(config: &Config, record: &SlideRecord, model: &ModelFile) -> Result<Vec<PatchPrediction>> {
    let extractor = ColorStatsFeatures;
    if model.feature_extractor != extractor.id() {
        return Err(PipelineError::Invalid(format!(
            "model uses feature extractor {:?}; slides can only be scored with {:?}",
            model.feature_extractor,
            extractor.id()
        )));
    }
    let head = model.head()?;
    let path = working_image_path(config, &record.name);
    let raster = image::open(&path)
        .map_err(|e| PipelineError::Image { path, source: e })?
        .to_rgb8();
    let grid = slide_grid(record)?;
    Ok(predict_patches(&head, &extractor, &grid, &raster, &record.name)?)
}

/// Polygons for one slide's predictions, clipped to the slide.
pub fn proposal_polygons(config: &Config, record: &SlideRecord, predictions: &[PatchPrediction]) -> Result<Vec<RegionPolygon>> {
    let grid = slide_grid(record)?;
    check_on_grid(predictions, &grid)?;
    let heatmap = interpolate(predictions, &grid, config.map_scale)?;
    Ok(heatmap_regions(&heatmap, config.tau, config.min_area_px, record.scale_factor)?)
}

/// Stores polygons as pending model proposals, one copy per assigned user
/// of `batch` (or of every batch holding the slide). Vertices are clipped to
/// the slide first. Earlier pending proposals for those views are replaced.
pub fn insert_as_annotations(
    store: &Store,
    slide: &str,
    batch: Option<&str>,
    polygons: &[RegionPolygon],
) -> Result<Vec<i64>> {
    let record = store.slide(slide)?;
    let rings: Vec<Vec<(f64, f64)>> = polygons
        .iter()
        .map(|p| p.clipped(record.width as f64, record.height as f64).vertices)
        .filter(|v| v.len() >= 3)
        .collect();
    Ok(store.replace_model_proposals(slide, batch, &rings, PROPOSAL_LABEL)?)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineOutcome {
    pub slide: String,
    pub predictions: usize,
    pub polygons: usize,
    pub proposal_ids: Vec<i64>,
}

/// Persists predictions, runs the heatmap and inserts proposals.
pub fn run_predictions(store: &Store, config: &Config, slide: &str, predictions: &[PatchPrediction]) -> Result<PipelineOutcome> {
    let record = store.slide(slide)?;
    if let Some(p) = predictions.iter().find(|p| p.slide_name != slide) {
        return Err(PipelineError::Invalid(format!(
            "prediction for slide {} submitted to slide {slide}",
            p.slide_name
        )));
    }
    let polygons = proposal_polygons(config, &record, predictions)?;
    store.replace_predictions(slide, predictions)?;
    let proposal_ids = insert_as_annotations(store, slide, None, &polygons)?;
    log::info!(
        "slide {slide}: {} predictions, {} regions, {} proposals",
        predictions.len(),
        polygons.len(),
        proposal_ids.len()
    );
    Ok(PipelineOutcome {
        slide: slide.to_string(),
        predictions: predictions.len(),
        polygons: polygons.len(),
        proposal_ids,
    })
}
