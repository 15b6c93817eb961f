//! Tissue detection on saturation and grid patching.

use serde::{Deserialize, Serialize};

use super::image::RgbImage;
use crate::error::{CoreError, Result};

/// Fraction of a grid cell that must be tissue for the cell to be kept.
pub const PATCH_MIN_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Number of set pixels in the `size×size` square at `(x, y)`.
    pub fn count_in(&self, x: usize, y: usize, size: usize) -> usize {
        (y..y + size)
            .map(|yy| self.data[yy * self.width + x..yy * self.width + x + size].iter().filter(|&&b| b).count())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub blur_radius: usize,
    pub saturation_threshold: f32,
    /// Components smaller than this many pixels are dropped.
    pub min_area: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            blur_radius: 3,
            saturation_threshold: 0.1,
            min_area: 1024,
        }
    }
}

/// HSV saturation `(max − min) / max`, 0 for black.
pub fn saturation(img: &RgbImage) -> Vec<f32> {
    img.data
        .chunks_exact(3)
        .map(|p| {
            let mx = p[0].max(p[1]).max(p[2]);
            let mn = p[0].min(p[1]).min(p[2]);
            if mx > 0.0 {
                (mx - mn) / mx
            } else {
                0.0
            }
        })
        .collect()
}

/// Mean over the `(2r+1)²` window, clipped at the borders.
pub fn box_blur(values: &[f32], width: usize, height: usize, r: usize) -> Vec<f32> {
    if r == 0 {
        return values.to_vec();
    }
    let stride = width + 1;
    let mut integral = vec![0f64; stride * (height + 1)];
    for y in 0..height {
        let mut row = 0f64;
        for x in 0..width {
            row += values[y * width + x] as f64;
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + row;
        }
    }
    let mut out = vec![0f32; width * height];
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(width));
            let s = integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0]
                + integral[y0 * stride + x0];
            out[y * width + x] = (s / ((y1 - y0) * (x1 - x0)) as f64) as f32;
        }
    }
    out
}

/// Drop 4-connected components with fewer than `min_area` pixels.
pub fn filter_components(mask: &mut Mask, min_area: usize) {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        component.clear();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if component.len() < min_area {
            for &i in &component {
                mask.data[i] = false;
            }
        }
    }
}

pub fn tissue_segment(img: &RgbImage, cfg: &SegmentConfig) -> Mask {
    let (w, h) = (img.width, img.height);
    let blurred = box_blur(&saturation(img), w, h, cfg.blur_radius);
    let mut mask = Mask {
        width: w,
        height: h,
        data: blurred.iter().map(|&s| s > cfg.saturation_threshold).collect(),
    };
    filter_components(&mut mask, cfg.min_area);
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchCoord {
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub coverage: f64,
}

impl PatchCoord {
    pub fn grid_cell(&self) -> (usize, usize) {
        (self.y / self.size, self.x / self.size)
    }
}

/// Non-overlapping `size` grid cells (row-major) with at least
/// `min_coverage` tissue.
pub fn extract_patches_with(mask: &Mask, size: usize, min_coverage: f64) -> Result<Vec<PatchCoord>> {
    if size == 0 || size > mask.width || size > mask.height {
        return Err(CoreError::Shape(format!(
            "patch size {size} does not fit a {}×{} slide",
            mask.width, mask.height
        )));
    }
    let area = (size * size) as f64;
    let mut out = Vec::new();
    for gy in 0..mask.height / size {
        for gx in 0..mask.width / size {
            let (x, y) = (gx * size, gy * size);
            let coverage = mask.count_in(x, y, size) as f64 / area;
            if coverage >= min_coverage && coverage > 0.0 {
                out.push(PatchCoord { x, y, size, coverage });
            }
        }
    }
    Ok(out)
}

pub fn extract_patches(mask: &Mask, size: usize) -> Result<Vec<PatchCoord>> {
    extract_patches_with(mask, size, PATCH_MIN_COVERAGE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_slide_has_no_tissue() {
        let img = RgbImage::filled(64, 64, [1.0; 3]);
        assert_eq!(tissue_segment(&img, &SegmentConfig::default()).count(), 0);
    }

    #[test]
    fn full_mask_tiles_a_four_by_four_grid() {
        let mask = Mask {
            width: 1024,
            height: 1024,
            data: vec![true; 1024 * 1024],
        };
        let p = extract_patches(&mask, 256).unwrap();
        assert_eq!(p.len(), 16);
        assert!(p.iter().all(|c| c.x % 256 == 0 && c.y % 256 == 0));
        assert!(extract_patches(&Mask::empty(1024, 1024), 256).unwrap().is_empty());
        assert!(extract_patches(&mask, 2048).is_err());
    }

    #[test]
    fn coverage_threshold_is_inclusive() {
        let mut mask = Mask::empty(4, 2);
        for y in 0..2 {
            mask.data[y * 4] = true;
        }
        let p = extract_patches(&mask, 2).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].coverage, 0.5);
    }

    #[test]
    fn small_components_are_removed() {
        let mut mask = Mask::empty(10, 10);
        mask.data[0] = true;
        for i in 50..60 {
            mask.data[i] = true;
        }
        filter_components(&mut mask, 5);
        assert_eq!(mask.count(), 10);
        assert!(!mask.data[0]);
    }

    #[test]
    fn blur_oracle() {
        let v = [0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = box_blur(&v, 3, 3, 1);
        assert!((b[4] - 1.0).abs() < 1e-6);
        assert!((b[2] - 2.25).abs() < 1e-6);
        assert!((b[0] - 0.0).abs() < 1e-6);
    }
}
