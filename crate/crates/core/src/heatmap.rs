//! Patch probabilities → dense probability map → filtered mask → polygons.
//!
//! The probability field is bilinear over the lattice of patch centers.
//! Lattice cells without a prediction hold 0, and queries outside the lattice
//! hull clamp to the nearest lattice cell. The dense map is sampled at
//! `map_scale` of the working resolution; map pixel `(i, j)` takes the field
//! value at working coordinates `(i / map_scale, j / map_scale)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pyramid::PatchGrid;
use crate::raster::{label_components, BinaryMask};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_MIN_AREA_PX: f64 = 1024.0;
pub const DEFAULT_MAP_SCALE: f64 = 0.125;
/// Douglas–Peucker tolerance in mask pixels.
pub const SIMPLIFY_EPSILON: f64 = 2.0;
/// Longest distance a Chaikin cut may move away from a corner, in mask pixels.
pub const MAX_CORNER_CUT: f64 = 2.0 * SIMPLIFY_EPSILON;

#[derive(Debug, Error, PartialEq)]
pub enum HeatmapError {
    #[error("map_scale {0} outside (0, 1]")]
    MapScale(f64),
    #[error("threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("probability {prob} at row {row} outside [0, 1]")]
    Probability { row: usize, prob: f64 },
    #[error("predictions off the patch grid at rows {0:?}")]
    OffGrid(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    pub slide_name: String,
    pub x: u32,
    pub y: u32,
    pub prob: f64,
}

/// Dense row-major f64 raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    /// Working-resolution extent.
    pub width: u32,
    pub height: u32,
    pub columns: u32,
    pub rows: u32,
    pub stride: u32,
    pub patch_size: u32,
    /// Probability per lattice center, row-major.
    pub values: Vec<f64>,
    pub map_scale: f64,
    pub map: ProbabilityMap,
}

impl HeatmapGrid {
    /// Working-resolution center of lattice cell `(col, row)`.
    pub fn center(&self, col: u32, row: u32) -> (f64, f64) {
        let half = self.patch_size as f64 / 2.0;
        (
            (col * self.stride) as f64 + half,
            (row * self.stride) as f64 + half,
        )
    }

    pub fn lattice_value(&self, col: u32, row: u32) -> f64 {
        self.values[(row * self.columns + col) as usize]
    }

    /// Bilinear field value at working-resolution coordinates.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        if self.columns == 0 || self.rows == 0 {
            return 0.0;
        }
        let half = self.patch_size as f64 / 2.0;
        let stride = self.stride as f64;
        let (i0, tx) = lattice_coord((x - half) / stride, self.columns);
        let (j0, ty) = lattice_coord((y - half) / stride, self.rows);
        let i1 = (i0 + 1).min(self.columns - 1);
        let j1 = (j0 + 1).min(self.rows - 1);
        let v00 = self.lattice_value(i0, j0);
        let v10 = self.lattice_value(i1, j0);
        let v01 = self.lattice_value(i0, j1);
        let v11 = self.lattice_value(i1, j1);
        let top = v00 + (v10 - v00) * tx;
        let bottom = v01 + (v11 - v01) * tx;
        top + (bottom - top) * ty
    }
}

/// Clamps a fractional lattice coordinate and splits it into cell + weight.
fn lattice_coord(u: f64, count: u32) -> (u32, f64) {
    let max = (count - 1) as f64;
    let u = u.clamp(0.0, max);
    if count == 1 {
        return (0, 0.0);
    }
    let i = (u.floor() as u32).min(count - 2);
    (i, u - i as f64)
}

pub fn map_dims(width: u32, height: u32, map_scale: f64) -> (u32, u32) {
    let d = |v: u32| ((v as f64 * map_scale).ceil() as u32).max(1);
    (d(width), d(height))
}

/// Builds the lattice and dense map for one slide.
pub fn interpolate(
    predictions: &[PatchPrediction],
    grid: &PatchGrid,
    map_scale: f64,
) -> Result<HeatmapGrid, HeatmapError> {
    if !(map_scale > 0.0 && map_scale <= 1.0) {
        return Err(HeatmapError::MapScale(map_scale));
    }
    let (columns, rows) = (grid.columns(), grid.rows());
    let mut values = vec![0.0; (columns * rows) as usize];
    let mut off_grid = Vec::new();
    for (row, p) in predictions.iter().enumerate() {
        if !(0.0..=1.0).contains(&p.prob) {
            return Err(HeatmapError::Probability { row, prob: p.prob });
        }
        match grid.cell_of(p.x, p.y) {
            Some((c, r)) => values[(r * columns + c) as usize] = p.prob,
            None => off_grid.push(row),
        }
    }
    if !off_grid.is_empty() {
        return Err(HeatmapError::OffGrid(off_grid));
    }
    if predictions.is_empty() {
        log::warn!("no patch predictions; heatmap is all zero");
    }

    let (mw, mh) = map_dims(grid.width, grid.height, map_scale);
    let mut h = HeatmapGrid {
        width: grid.width,
        height: grid.height,
        columns,
        rows,
        stride: grid.stride,
        patch_size: grid.patch_size,
        values,
        map_scale,
        map: ProbabilityMap {
            width: mw,
            height: mh,
            values: Vec::new(),
        },
    };
    let mut map = Vec::with_capacity(mw as usize * mh as usize);
    for j in 0..mh {
        for i in 0..mw {
            map.push(h.sample(i as f64 / map_scale, j as f64 / map_scale));
        }
    }
    h.map.values = map;
    Ok(h)
}

pub fn threshold(map: &ProbabilityMap, tau: f64) -> BinaryMask {
    BinaryMask::from_fn(map.width, map.height, |x, y| map.get(x, y) >= tau)
}

const CROSS: [(i64, i64); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

/// Erosion with a 3×3 cross; neighbours outside the raster are ignored.
pub fn erode_cross(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        CROSS.iter().all(|(dx, dy)| {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            nx < 0 || ny < 0 || nx >= w || ny >= h || mask.get(nx as u32, ny as u32)
        })
    })
}

pub fn dilate_cross(mask: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        CROSS
            .iter()
            .any(|(dx, dy)| mask.get_signed(x as i64 + dx, y as i64 + dy))
    })
}

/// One iteration of opening with a 3×3 cross.
pub fn open_cross(mask: &BinaryMask) -> BinaryMask {
    dilate_cross(&erode_cross(mask))
}

/// Drops 8-connected components with fewer than `min_area` pixels.
pub fn remove_small_components(mask: &BinaryMask, min_area: f64) -> BinaryMask {
    let labels = label_components(mask);
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        let l = labels.labels[y as usize * mask.width() as usize + x as usize];
        l != 0 && labels.areas[l as usize] as f64 >= min_area
    })
}

/// Threshold, 3×3 cross opening, then removal of small components.
/// `min_area_px` is in working-resolution pixels and is rescaled to the map.
pub fn threshold_and_filter(
    h: &HeatmapGrid,
    tau: f64,
    min_area_px: f64,
) -> Result<BinaryMask, HeatmapError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(HeatmapError::Threshold(tau));
    }
    let raw = threshold(&h.map, tau);
    let opened = open_cross(&raw);
    Ok(remove_small_components(
        &opened,
        min_area_px * h.map_scale * h.map_scale,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPolygon {
    pub vertices: Vec<(f64, f64)>,
    pub area_px: f64,
    /// Working → native resolution multiplier.
    pub scale_factor: f64,
}

impl RegionPolygon {
    pub fn new(vertices: Vec<(f64, f64)>, scale_factor: f64) -> Self {
        let area_px = polygon_area(&vertices);
        Self {
            vertices,
            area_px,
            scale_factor,
        }
    }

    /// Multiplies every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.vertices
                .iter()
                .map(|&(x, y)| (x * factor, y * factor))
                .collect(),
            self.scale_factor,
        )
    }

    /// Clamps every vertex into `[0, width] × [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.vertices
                .iter()
                .map(|&(x, y)| (x.clamp(0.0, width), y.clamp(0.0, height)))
                .collect(),
            self.scale_factor,
        )
    }

    pub fn native_vertices(&self) -> Vec<(f64, f64)> {
        self.vertices
            .iter()
            .map(|&(x, y)| (x * self.scale_factor, y * self.scale_factor))
            .collect()
    }
}

/// Absolute shoelace area.
pub fn polygon_area(vertices: &[(f64, f64)]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (x0, y0) = vertices[i];
        let (x1, y1) = vertices[(i + 1) % n];
        twice += x0 * y1 - x1 * y0;
    }
    twice.abs() / 2.0
}

/// Outer border of each 8-connected component, simplified and smoothed.
/// Vertices are in mask pixel-corner coordinates. Holes are not traced.
pub fn extract_polygons(mask: &BinaryMask) -> Vec<RegionPolygon> {
    let labels = label_components(mask);
    let mut first_pixel = vec![None; labels.areas.len()];
    for (idx, &l) in labels.labels.iter().enumerate() {
        if l != 0 && first_pixel[l as usize].is_none() {
            first_pixel[l as usize] = Some(idx);
        }
    }
    let w = mask.width() as usize;
    first_pixel
        .iter()
        .enumerate()
        .skip(1)
        .filter_map(|(label, start)| {
            let start = (*start)?;
            let contour = trace_outer_border(&labels, label as u32, (start % w) as i64, (start / w) as i64);
            let mut simplified = simplify_closed(&contour, SIMPLIFY_EPSILON);
            if simplified.len() < 3 {
                simplified = contour;
            }
            let smooth = chaikin_closed(&simplified, MAX_CORNER_CUT);
            Some(RegionPolygon::new(smooth, 1.0))
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Heading {
    East,
    South,
    West,
    North,
}

impl Heading {
    fn step(self) -> (i64, i64) {
        match self {
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
            Heading::North => (0, -1),
        }
    }

    fn left(self) -> Self {
        match self {
            Heading::East => Heading::North,
            Heading::North => Heading::West,
            Heading::West => Heading::South,
            Heading::South => Heading::East,
        }
    }

    fn right(self) -> Self {
        match self {
            Heading::East => Heading::South,
            Heading::South => Heading::West,
            Heading::West => Heading::North,
            Heading::North => Heading::East,
        }
    }

    /// Pixels ahead-left and ahead-right of lattice vertex `(x, y)`.
    fn ahead(self, x: i64, y: i64) -> ((i64, i64), (i64, i64)) {
        match self {
            Heading::East => ((x, y - 1), (x, y)),
            Heading::South => ((x, y), (x - 1, y)),
            Heading::West => ((x - 1, y), (x - 1, y - 1)),
            Heading::North => ((x - 1, y - 1), (x, y - 1)),
        }
    }
}

/// Crack-following walk along pixel edges, keeping the component on the
/// right. Diagonal contacts are crossed (8-connectivity). Starts at the top
/// edge of the component's first pixel in raster order and emits corners only.
fn trace_outer_border(labels: &crate::raster::ComponentLabels, label: u32, sx: i64, sy: i64) -> Vec<(f64, f64)> {
    let inside = |(x, y): (i64, i64)| labels.label_at(x, y) == label;
    let mut corners = vec![(sx as f64, sy as f64)];
    let (mut x, mut y) = (sx + 1, sy);
    let mut heading = Heading::East;
    loop {
        let (left, right) = heading.ahead(x, y);
        let next = if inside(left) {
            heading.left()
        } else if inside(right) {
            heading
        } else {
            heading.right()
        };
        if (x, y) == (sx, sy) {
            break;
        }
        if next != heading {
            corners.push((x as f64, y as f64));
        }
        heading = next;
        let (dx, dy) = heading.step();
        x += dx;
        y += dy;
    }
    corners
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.0 - a.0).powi(2) + (p.1 - a.1).powi(2)).sqrt();
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Douglas–Peucker on an open polyline; endpoints are kept.
pub fn simplify_open(points: &[(f64, f64)], epsilon: f64) -> Vec<(f64, f64)> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0usize, points.len() - 1)];
    while let Some((a, b)) = stack.pop() {
        let mut best = (0.0, 0usize);
        for i in a + 1..b {
            let d = point_segment_distance(points[i], points[a], points[b]);
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > epsilon {
            keep[best.1] = true;
            stack.push((a, best.1));
            stack.push((best.1, b));
        }
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

/// Douglas–Peucker on a closed ring, split at the first vertex and the vertex
/// farthest from it.
pub fn simplify_closed(ring: &[(f64, f64)], epsilon: f64) -> Vec<(f64, f64)> {
    if ring.len() < 4 {
        return ring.to_vec();
    }
    let origin = ring[0];
    let far = (1..ring.len())
        .max_by(|&a, &b| {
            let da = (ring[a].0 - origin.0).powi(2) + (ring[a].1 - origin.1).powi(2);
            let db = (ring[b].0 - origin.0).powi(2) + (ring[b].1 - origin.1).powi(2);
            da.total_cmp(&db)
        })
        .unwrap();
    let first = simplify_open(&ring[..=far], epsilon);
    let mut second_chain: Vec<_> = ring[far..].to_vec();
    second_chain.push(origin);
    let second = simplify_open(&second_chain, epsilon);
    let mut out = first;
    out.extend_from_slice(&second[1..second.len() - 1]);
    out
}

/// One Chaikin corner-cutting pass over a closed ring. Each edge contributes
/// points at a quarter of its length from either end, but never farther than
/// `max_cut` from the corner.
pub fn chaikin_closed(ring: &[(f64, f64)], max_cut: f64) -> Vec<(f64, f64)> {
    let n = ring.len();
    if n < 3 {
        return ring.to_vec();
    }
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        let t = (0.25 * len).min(max_cut) / len;
        out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
        out.push((b.0 - (b.0 - a.0) * t, b.1 - (b.1 - a.1) * t));
    }
    out
}

/// Marks pixels whose centers fall inside the polygon (even-odd rule).
pub fn rasterize_polygon(vertices: &[(f64, f64)], width: u32, height: u32) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    let n = vertices.len();
    if n < 3 {
        return mask;
    }
    let mut crossings = Vec::new();
    for y in 0..height {
        let cy = y as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % n];
            if (y0 <= cy) != (y1 <= cy) {
                crossings.push(x0 + (cy - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0) as i64;
            let end = ((pair[1] - 0.5).ceil() as i64).min(width as i64);
            for x in start..end {
                mask.set(x as u32, y, true);
            }
        }
    }
    mask
}

/// `true` when no two non-adjacent edges intersect.
pub fn is_simple(vertices: &[(f64, f64)]) -> bool {
    let n = vertices.len();
    if n < 3 {
        return false;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        for j in i + 1..n {
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (c, d) = (vertices[j], vertices[(j + 1) % n]);
            let d1 = cross(c, d, a);
            let d2 = cross(c, d, b);
            let d3 = cross(a, b, c);
            let d4 = cross(a, b, d);
            if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
                return false;
            }
        }
    }
    true
}

/// Full post-processing for one slide: polygons in working-resolution pixels.
pub fn heatmap_regions(
    h: &HeatmapGrid,
    tau: f64,
    min_area_px: f64,
    scale_factor: f64,
) -> Result<Vec<RegionPolygon>, HeatmapError> {
    let mask = threshold_and_filter(h, tau, min_area_px)?;
    Ok(extract_polygons(&mask)
        .into_iter()
        .map(|p| {
            let mut poly = p.scaled(1.0 / h.map_scale).clipped(h.width as f64, h.height as f64);
            poly.scale_factor = scale_factor;
            poly
        })
        .collect())
}

/// Groups predictions by slide name, keeping input order.
pub fn group_by_slide(predictions: Vec<PatchPrediction>) -> HashMap<String, Vec<PatchPrediction>> {
    let mut out: HashMap<String, Vec<PatchPrediction>> = HashMap::new();
    for p in predictions {
        out.entry(p.slide_name.clone()).or_default().push(p);
    }
    out
}
