//! Small raster helpers shared by the pyramid and heatmap stages.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

/// Row-major binary raster. `true` marks foreground.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    /// Out-of-bounds reads return `false`.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    /// Fraction of foreground pixels; 0 for a zero-sized mask.
    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.bits.len() as f64
        }
    }

    /// `true` when every foreground pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    /// Intersection over union; two empty masks give 1.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.bits.iter().zip(&other.bits) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Summed-area table with a zero first row/column; size (w+1)×(h+1).
    pub fn integral(&self) -> Vec<u64> {
        let w = self.width as usize;
        let h = self.height as usize;
        let stride = w + 1;
        let mut table = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += self.bits[y * w + x] as u64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        table
    }
}

/// Connected-component labels (8-connectivity). Label 0 is background,
/// components are numbered from 1 in raster-scan order of their first pixel.
#[derive(Debug, Clone)]
pub struct ComponentLabels {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    /// Pixel count per label; index 0 is unused.
    pub areas: Vec<usize>,
}

impl ComponentLabels {
    pub fn count(&self) -> usize {
        self.areas.len() - 1
    }

    #[inline]
    pub fn label_at(&self, x: i64, y: i64) -> u32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return 0;
        }
        self.labels[y as usize * self.width as usize + x as usize]
    }
}

pub fn label_components(mask: &BinaryMask) -> ComponentLabels {
    let w = mask.width() as usize;
    let h = mask.height() as usize;
    let mut labels = vec![0u32; w * h];
    let mut areas = vec![0usize];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32;
        let mut area = 0usize;
        labels[start] = label;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            area += 1;
            let (x, y) = ((idx % w) as i64, (idx / w) as i64);
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask.bits[n] && labels[n] == 0 {
                        labels[n] = label;
                        stack.push(n);
                    }
                }
            }
        }
        areas.push(area);
    }
    ComponentLabels {
        width: mask.width(),
        height: mask.height(),
        labels,
        areas,
    }
}

/// Averages `[start, end)` blocks defined by `factor` along each axis.
/// Output dims are `ceil(dim / factor)`; trailing partial blocks average over
/// the pixels that exist.
pub fn box_downsample(src: &RgbImage, factor: f64) -> RgbImage {
    assert!(factor >= 1.0, "box_downsample only shrinks");
    let ranges_x = block_ranges(src.width(), factor);
    let ranges_y = block_ranges(src.height(), factor);
    average_blocks(src, &ranges_x, &ranges_y)
}

/// Resizes to exactly `out_w × out_h` with area averaging. Shrinking only.
pub fn box_resize(src: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    assert!(out_w >= 1 && out_h >= 1 && out_w <= src.width() && out_h <= src.height());
    let split = |dim: u32, out: u32| -> Vec<(u32, u32)> {
        (0..out as u64)
            .map(|i| {
                let a = (i * dim as u64 / out as u64) as u32;
                let b = ((i + 1) * dim as u64 / out as u64) as u32;
                (a, b.max(a + 1))
            })
            .collect()
    };
    average_blocks(
        src,
        &split(src.width(), out_w),
        &split(src.height(), out_h),
    )
}

fn block_ranges(dim: u32, factor: f64) -> Vec<(u32, u32)> {
    let mut ranges = Vec::new();
    let mut i = 0u64;
    loop {
        let start = (i as f64 * factor).floor() as u32;
        if start >= dim {
            break;
        }
        let end = (((i + 1) as f64 * factor).floor() as u32).min(dim).max(start + 1);
        ranges.push((start, end));
        i += 1;
    }
    ranges
}

fn average_blocks(src: &RgbImage, rx: &[(u32, u32)], ry: &[(u32, u32)]) -> RgbImage {
    let mut out = RgbImage::new(rx.len() as u32, ry.len() as u32);
    for (oy, &(y0, y1)) in ry.iter().enumerate() {
        for (ox, &(x0, x1)) in rx.iter().enumerate() {
            let mut sum = [0u64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = src.get_pixel(x, y).0;
                    sum[0] += p[0] as u64;
                    sum[1] += p[1] as u64;
                    sum[2] += p[2] as u64;
                }
            }
            let n = ((x1 - x0) as u64) * ((y1 - y0) as u64);
            let avg = |s: u64| ((s + n / 2) / n) as u8;
            out.put_pixel(
                ox as u32,
                oy as u32,
                Rgb([avg(sum[0]), avg(sum[1]), avg(sum[2])]),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn odd_dims_average_available_pixels() {
        let mut img = RgbImage::new(3, 1);
        img.put_pixel(0, 0, Rgb([0, 0, 0]));
        img.put_pixel(1, 0, Rgb([100, 100, 100]));
        img.put_pixel(2, 0, Rgb([7, 8, 9]));
        let out = box_downsample(&img, 2.0);
        assert_eq!(out.dimensions(), (2, 1));
        assert_eq!(out.get_pixel(0, 0).0, [50, 50, 50]);
        assert_eq!(out.get_pixel(1, 0).0, [7, 8, 9]);
    }

    #[test]
    fn resize_to_exact_dims() {
        let img = RgbImage::from_pixel(512, 512, Rgb([10, 20, 30]));
        let out = box_resize(&img, 224, 224);
        assert_eq!(out.dimensions(), (224, 224));
        assert!(out.pixels().all(|p| p.0 == [10, 20, 30]));
    }

    #[test]
    fn components_use_eight_connectivity() {
        // Two diagonal pixels form one component; a distant one forms another.
        let mut m = BinaryMask::new(5, 5);
        m.set(0, 0, true);
        m.set(1, 1, true);
        m.set(4, 4, true);
        let labels = label_components(&m);
        assert_eq!(labels.count(), 2);
        assert_eq!(labels.areas[1], 2);
        assert_eq!(labels.areas[2], 1);
    }

    #[test]
    fn integral_counts_windows() {
        let m = BinaryMask::from_fn(4, 3, |x, y| (x + y) % 2 == 0);
        let t = m.integral();
        assert_eq!(t[3 * 5 + 4] as usize, m.count());
    }
}
