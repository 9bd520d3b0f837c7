//! Deep Zoom tile pyramids, tissue masks and patch grids.
//!
//! Levels follow the Deep Zoom convention: level 0 is a single pixel and
//! `max_level` is the full working resolution. Each lower level is the 2×2
//! box average of the one above it.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};
use quick_xml::events::Event;
use quick_xml::Reader;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{box_downsample, BinaryMask};

pub const DEFAULT_TILE_SIZE: u32 = 254;
pub const DEFAULT_OVERLAP: u32 = 1;
pub const DEFAULT_PATCH_SIZE: u32 = 512;
pub const DEFAULT_STRIDE: u32 = 256;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PyramidError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("upsampling is not supported: target magnification {target} exceeds scan magnification {scan}")]
    Upsampling { scan: f64, target: f64 },
    #[error("malformed descriptor: {0}")]
    Descriptor(String),
    #[error("tile ({col}, {row}) at level {level} is outside the pyramid")]
    TileOutOfRange { level: u32, col: u32, row: u32 },
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PyramidError + '_ {
    move |source| PyramidError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Tile encoding. PNG is lossless and the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TileFormat {
    #[default]
    Png,
    Jpeg,
}

impl TileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TileFormat::Png => "png",
            TileFormat::Jpeg => "jpeg",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            TileFormat::Png => "image/png",
            TileFormat::Jpeg => "image/jpeg",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "png" => Some(TileFormat::Png),
            "jpg" | "jpeg" => Some(TileFormat::Jpeg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePyramidDescriptor {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub tile_size: u32,
    pub overlap: u32,
    pub format: TileFormat,
    pub max_level: u32,
    /// Indexed by level, 0..=max_level.
    pub level_dims: Vec<(u32, u32)>,
}

/// Smallest `L` with `2^L >= max(width, height)`.
pub fn max_level_for(width: u32, height: u32) -> u32 {
    let m = width.max(height).max(1) as u64;
    let mut level = 0;
    while (1u64 << level) < m {
        level += 1;
    }
    level
}

impl TilePyramidDescriptor {
    pub fn new(
        slide_id: impl Into<String>,
        width: u32,
        height: u32,
        tile_size: u32,
        overlap: u32,
        format: TileFormat,
    ) -> Result<Self, PyramidError> {
        if width == 0 || height == 0 {
            return Err(PyramidError::EmptyImage);
        }
        if tile_size == 0 {
            return Err(PyramidError::InvalidParameter("tile_size must be >= 1".into()));
        }
        if overlap >= tile_size {
            return Err(PyramidError::InvalidParameter(format!(
                "overlap {overlap} must be smaller than tile_size {tile_size}"
            )));
        }
        let max_level = max_level_for(width, height);
        let mut dims = vec![(0, 0); max_level as usize + 1];
        let (mut w, mut h) = (width, height);
        for level in (0..=max_level as usize).rev() {
            dims[level] = (w, h);
            w = w.div_ceil(2);
            h = h.div_ceil(2);
        }
        Ok(Self {
            slide_id: slide_id.into(),
            width,
            height,
            tile_size,
            overlap,
            format,
            max_level,
            level_dims: dims,
        })
    }

    /// Tile columns and rows at `level`.
    pub fn tile_grid(&self, level: u32) -> Option<(u32, u32)> {
        let (w, h) = *self.level_dims.get(level as usize)?;
        Some((w.div_ceil(self.tile_size), h.div_ceil(self.tile_size)))
    }

    pub fn tile_count(&self, level: u32) -> Option<u32> {
        self.tile_grid(level).map(|(c, r)| c * r)
    }

    pub fn contains_tile(&self, level: u32, col: u32, row: u32) -> bool {
        matches!(self.tile_grid(level), Some((c, r)) if col < c && row < r)
    }

    /// Pixel rectangle `(x, y, w, h)` of a tile in its level raster,
    /// including overlap margins clipped to the level bounds.
    pub fn tile_rect(&self, level: u32, col: u32, row: u32) -> Result<(u32, u32, u32, u32), PyramidError> {
        if !self.contains_tile(level, col, row) {
            return Err(PyramidError::TileOutOfRange { level, col, row });
        }
        let (lw, lh) = self.level_dims[level as usize];
        let span = |idx: u32, dim: u32| {
            let start = (idx * self.tile_size).saturating_sub(if idx > 0 { self.overlap } else { 0 });
            let end = ((idx + 1) * self.tile_size + self.overlap).min(dim);
            (start, end - start)
        };
        let (x, w) = span(col, lw);
        let (y, h) = span(row, lh);
        Ok((x, y, w, h))
    }

    pub fn files_dir(&self, root: &Path) -> PathBuf {
        root.join(format!("{}_files", self.slide_id))
    }

    pub fn descriptor_path(&self, root: &Path) -> PathBuf {
        root.join(format!("{}.dzi", self.slide_id))
    }

    pub fn tile_path(&self, root: &Path, level: u32, col: u32, row: u32) -> PathBuf {
        self.files_dir(root)
            .join(level.to_string())
            .join(format!("{col}_{row}.{}", self.format.extension()))
    }

    pub fn to_dzi_xml(&self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
             <Image xmlns=\"http://schemas.microsoft.com/deepzoom/2008\" TileSize=\"{}\" Overlap=\"{}\" Format=\"{}\">\n  \
             <Size Width=\"{}\" Height=\"{}\"/>\n\
             </Image>\n",
            self.tile_size,
            self.overlap,
            self.format.extension(),
            self.width,
            self.height
        )
    }

    pub fn from_dzi_xml(slide_id: &str, xml: &str) -> Result<Self, PyramidError> {
        let mut reader = Reader::from_str(xml);
        let (mut tile_size, mut overlap, mut format) = (None, None, None);
        let (mut width, mut height) = (None, None);
        loop {
            match reader.read_event() {
                Ok(Event::Start(e)) | Ok(Event::Empty(e)) => {
                    let name = e.local_name();
                    for attr in e.attributes().flatten() {
                        let value = attr
                            .unescape_value()
                            .map_err(|err| PyramidError::Descriptor(err.to_string()))?
                            .into_owned();
                        match (name.as_ref(), attr.key.local_name().as_ref()) {
                            (b"Image", b"TileSize") => tile_size = Some(value),
                            (b"Image", b"Overlap") => overlap = Some(value),
                            (b"Image", b"Format") => format = Some(value),
                            (b"Size", b"Width") => width = Some(value),
                            (b"Size", b"Height") => height = Some(value),
                            _ => {}
                        }
                    }
                }
                Ok(Event::Eof) => break,
                Ok(_) => {}
                Err(err) => return Err(PyramidError::Descriptor(err.to_string())),
            }
        }
        let num = |v: Option<String>, what: &str| -> Result<u32, PyramidError> {
            v.ok_or_else(|| PyramidError::Descriptor(format!("missing {what}")))?
                .parse()
                .map_err(|_| PyramidError::Descriptor(format!("{what} is not an integer")))
        };
        let fmt = format.ok_or_else(|| PyramidError::Descriptor("missing Format".into()))?;
        let format = TileFormat::from_extension(&fmt)
            .ok_or_else(|| PyramidError::Descriptor(format!("unsupported format {fmt}")))?;
        Self::new(
            slide_id,
            num(width, "Width")?,
            num(height, "Height")?,
            num(tile_size, "TileSize")?,
            num(overlap, "Overlap")?,
            format,
        )
    }
}

/// Encodes a raster with the given tile format. Output is deterministic.
pub fn encode_tile(img: &RgbImage, format: TileFormat) -> Result<Vec<u8>, PyramidError> {
    let mut buf = Cursor::new(Vec::new());
    match format {
        TileFormat::Png => PngEncoder::new(&mut buf).write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )?,
        TileFormat::Jpeg => JpegEncoder::new_with_quality(&mut buf, 90).write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )?,
    }
    Ok(buf.into_inner())
}

/// Writes `<root>/<slide>.dzi` and every tile under `<root>/<slide>_files/`.
///
/// Tiles within a level are encoded in parallel; the bytes written do not
/// depend on scheduling.
pub fn build_pyramid(
    image: &RgbImage,
    slide_id: &str,
    root: &Path,
    tile_size: u32,
    overlap: u32,
    format: TileFormat,
) -> Result<TilePyramidDescriptor, PyramidError> {
    let desc = TilePyramidDescriptor::new(
        slide_id,
        image.width(),
        image.height(),
        tile_size,
        overlap,
        format,
    )?;
    fs::create_dir_all(root).map_err(io_err(root))?;

    let mut level_img = image.clone();
    for level in (0..=desc.max_level).rev() {
        debug_assert_eq!(level_img.dimensions(), desc.level_dims[level as usize]);
        let dir = desc.files_dir(root).join(level.to_string());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let (cols, rows) = desc.tile_grid(level).expect("level in range");
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (c, r)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .try_for_each(|(col, row)| -> Result<(), PyramidError> {
                let (x, y, w, h) = desc.tile_rect(level, col, row)?;
                let tile = image::imageops::crop_imm(&level_img, x, y, w, h).to_image();
                let bytes = encode_tile(&tile, format)?;
                let path = desc.tile_path(root, level, col, row);
                fs::write(&path, bytes).map_err(io_err(&path))
            })?;
        if level > 0 {
            level_img = box_downsample(&level_img, 2.0);
        }
    }

    let path = desc.descriptor_path(root);
    fs::write(&path, desc.to_dzi_xml()).map_err(io_err(&path))?;
    Ok(desc)
}

pub fn read_descriptor(root: &Path, slide_id: &str) -> Result<TilePyramidDescriptor, PyramidError> {
    let path = root.join(format!("{slide_id}.dzi"));
    let xml = fs::read_to_string(&path).map_err(io_err(&path))?;
    TilePyramidDescriptor::from_dzi_xml(slide_id, &xml)
}

/// Stitches one level back together from its tiles, trimming overlaps.
pub fn reassemble_level(
    desc: &TilePyramidDescriptor,
    root: &Path,
    level: u32,
) -> Result<RgbImage, PyramidError> {
    let (lw, lh) = *desc
        .level_dims
        .get(level as usize)
        .ok_or(PyramidError::TileOutOfRange { level, col: 0, row: 0 })?;
    let (cols, rows) = desc.tile_grid(level).expect("level in range");
    let mut out = RgbImage::new(lw, lh);
    for row in 0..rows {
        for col in 0..cols {
            let (x, y, _, _) = desc.tile_rect(level, col, row)?;
            let path = desc.tile_path(root, level, col, row);
            let tile = image::open(&path)?.to_rgb8();
            // Copy only the tile's own cell, skipping the leading overlap.
            let cx = col * desc.tile_size;
            let cy = row * desc.tile_size;
            let cw = desc.tile_size.min(lw - cx);
            let ch = desc.tile_size.min(lh - cy);
            for dy in 0..ch {
                for dx in 0..cw {
                    let p = *tile.get_pixel(cx - x + dx, cy - y + dy);
                    out.put_pixel(cx + dx, cy + dy, p);
                }
            }
        }
    }
    Ok(out)
}

/// Magenta intensity used for tissue detection: the complement of green.
#[inline]
pub fn magenta(pixel: &image::Rgb<u8>) -> u8 {
    255 - pixel.0[1]
}

pub fn magenta_histogram(image: &RgbImage) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in image.pixels() {
        hist[magenta(p) as usize] += 1;
    }
    hist
}

/// Otsu threshold over a 256-bin histogram.
///
/// Pixels `<= t` form the background class. Returns the lowest `t` that
/// maximizes the between-class variance, or `None` when fewer than two bins
/// are populated.
pub fn otsu_threshold(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let (mut n0, mut s0) = (0u64, 0f64);
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        n0 += hist[t];
        s0 += t as f64 * hist[t] as f64;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
        let diff = s0 / n0 as f64 - (sum_all - s0) / n1 as f64;
        let var = w0 * w1 * diff * diff;
        if best.is_none_or(|(_, b)| var > b) {
            best = Some((t as u8, var));
        }
    }
    best.map(|(t, _)| t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueMask {
    pub mask: BinaryMask,
    pub threshold_used: u8,
    /// Set when the magenta channel is constant and no threshold exists.
    pub degenerate: bool,
}

impl TissueMask {
    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }

    pub fn tissue_fraction(&self) -> f64 {
        self.mask.fraction()
    }
}

/// Otsu over the magenta channel; pixels strictly above the threshold are tissue.
pub fn tissue_mask(image: &RgbImage) -> TissueMask {
    let hist = magenta_histogram(image);
    match otsu_threshold(&hist) {
        Some(t) => TissueMask {
            mask: BinaryMask::from_fn(image.width(), image.height(), |x, y| {
                magenta(image.get_pixel(x, y)) > t
            }),
            threshold_used: t,
            degenerate: false,
        },
        None => {
            log::warn!("constant magenta channel; tissue mask is empty");
            let level = hist.iter().position(|&c| c > 0).unwrap_or(0) as u8;
            TissueMask {
                mask: BinaryMask::new(image.width(), image.height()),
                threshold_used: level,
                degenerate: true,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub width: u32,
    pub height: u32,
    pub patch_size: u32,
    pub stride: u32,
    pub min_fraction: f64,
    /// Top-left corners, row-major.
    pub positions: Vec<(u32, u32)>,
    /// Per-position tissue fraction, parallel to `positions`.
    pub tissue_fraction: Vec<f64>,
    /// Indices into `positions` meeting `min_fraction`.
    pub kept: Vec<usize>,
}

impl PatchGrid {
    /// Patch count along one axis.
    pub fn axis_count(dim: u32, patch_size: u32, stride: u32) -> u32 {
        if dim < patch_size {
            0
        } else {
            (dim - patch_size) / stride + 1
        }
    }

    pub fn columns(&self) -> u32 {
        Self::axis_count(self.width, self.patch_size, self.stride)
    }

    pub fn rows(&self) -> u32 {
        Self::axis_count(self.height, self.patch_size, self.stride)
    }

    pub fn kept_positions(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.kept.iter().map(|&i| self.positions[i])
    }

    /// Lattice cell of a top-left corner, if it lies on the grid.
    pub fn cell_of(&self, x: u32, y: u32) -> Option<(u32, u32)> {
        if x % self.stride != 0 || y % self.stride != 0 {
            return None;
        }
        let (c, r) = (x / self.stride, y / self.stride);
        (c < self.columns() && r < self.rows()).then_some((c, r))
    }
}

pub fn extract_patch_grid(
    mask: &TissueMask,
    patch_size: u32,
    stride: u32,
    min_fraction: f64,
) -> Result<PatchGrid, PyramidError> {
    if stride == 0 || patch_size < stride {
        return Err(PyramidError::InvalidParameter(format!(
            "need patch_size >= stride >= 1, got patch_size {patch_size}, stride {stride}"
        )));
    }
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(PyramidError::InvalidParameter(format!(
            "min_fraction {min_fraction} outside [0, 1]"
        )));
    }
    let (w, h) = (mask.width(), mask.height());
    let cols = PatchGrid::axis_count(w, patch_size, stride);
    let rows = PatchGrid::axis_count(h, patch_size, stride);
    let table = mask.mask.integral();
    let tw = w as usize + 1;
    let area = patch_size as f64 * patch_size as f64;

    let mut positions = Vec::with_capacity((cols * rows) as usize);
    let mut fractions = Vec::with_capacity(positions.capacity());
    let mut kept = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = ((c * stride) as usize, (r * stride) as usize);
            let (x1, y1) = (x0 + patch_size as usize, y0 + patch_size as usize);
            let count = table[y1 * tw + x1] + table[y0 * tw + x0] - table[y0 * tw + x1] - table[y1 * tw + x0];
            let fraction = count as f64 / area;
            if fraction >= min_fraction {
                kept.push(positions.len());
            }
            positions.push((x0 as u32, y0 as u32));
            fractions.push(fraction);
        }
    }
    Ok(PatchGrid {
        width: w,
        height: h,
        patch_size,
        stride,
        min_fraction,
        positions,
        tissue_fraction: fractions,
        kept,
    })
}

/// Scales a scan down to the working magnification with box averaging.
/// Returns the raster and the working→native scale factor (`scan / target`).
pub fn downsample_to_working_resolution(
    source: &RgbImage,
    scan_magnification: f64,
    target_magnification: f64,
) -> Result<(RgbImage, f64), PyramidError> {
    if !(scan_magnification > 0.0 && target_magnification > 0.0) {
        return Err(PyramidError::InvalidParameter(
            "magnifications must be positive".into(),
        ));
    }
    if target_magnification > scan_magnification {
        return Err(PyramidError::Upsampling {
            scan: scan_magnification,
            target: target_magnification,
        });
    }
    if source.width() == 0 || source.height() == 0 {
        return Err(PyramidError::EmptyImage);
    }
    let factor = scan_magnification / target_magnification;
    if factor == 1.0 {
        return Ok((source.clone(), 1.0));
    }
    Ok((box_downsample(source, factor), factor))
}
