//! RGB rasters (HWC, f32 in [0, 1]) and their on-disk forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use efcm_tensor::{Container, Tensor};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(CoreError::Shape(format!(
                "{width}×{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(CoreError::Shape(format!(
                "crop {w}×{h} at ({x0},{y0}) exceeds {}×{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(Self { width: w, height: h, data })
    }

    /// Mean over `f×f` blocks; dimensions must be divisible by `f`.
    pub fn box_downsample(&self, f: usize) -> Result<Self> {
        if f == 0 || !self.width.is_multiple_of(f) || !self.height.is_multiple_of(f) {
            return Err(CoreError::Shape(format!("{}×{} not divisible by {f}", self.width, self.height)));
        }
        let (w, h) = (self.width / f, self.height / f);
        let mut out = vec![0f32; w * h * 3];
        let norm = 1.0 / (f * f) as f32;
        for y in 0..self.height {
            for x in 0..self.width {
                let o = ((y / f) * w + x / f) * 3;
                let i = (y * self.width + x) * 3;
                for c in 0..3 {
                    out[o + c] += self.data[i + c];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= norm);
        Ok(Self { width: w, height: h, data: out })
    }

    /// Planar `3×H×W`.
    pub fn to_planar(&self) -> Tensor<f32> {
        let hw = self.width * self.height;
        Tensor::from_fn([3, self.height, self.width], |i| self.data[(i % hw) * 3 + i / hw])
    }

    pub fn from_planar(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(CoreError::Shape(format!("expected 3×H×W, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let p = t.data();
        let data = (0..hw * 3).map(|i| p[(i % 3) * hw + i / 3]).collect();
        Self::new(w, h, data)
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self> {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let data = match img {
            image::DynamicImage::ImageRgb8(b) => b.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
            image::DynamicImage::ImageRgb16(b) => b.as_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
            image::DynamicImage::ImageRgb32F(b) => b.as_raw().clone(),
            other => {
                return Err(CoreError::Image(format!("expected an RGB raster, got {:?}", other.color())));
            }
        };
        Self::new(width, height, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length checked at construction")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| CoreError::Image(format!("{}: {e}", path.display())))?;
        Self::from_dynamic(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| CoreError::Image(format!("{}: {e}", path.display())))
    }

    /// Quantize to 8 bits and back, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterFormat {
    #[default]
    Png,
    /// Planar f32 array in the portable container (`.json` + `.bin`).
    Raw,
}

/// Write `img` as `dir/id.{png,json}`; returns the file name.
pub fn save_raster(img: &RgbImage, dir: &Path, id: &str, format: RasterFormat) -> Result<String> {
    match format {
        RasterFormat::Png => {
            let name = format!("{id}.png");
            img.save_png(&dir.join(&name))?;
            Ok(name)
        }
        RasterFormat::Raw => {
            let name = format!("{id}.json");
            let mut c = Container::new(serde_json::json!({ "layout": "planar-chw" }));
            c.insert("image", &img.to_planar())?;
            c.save(&dir.join(&name))?;
            Ok(name)
        }
    }
}

pub fn load_raster(path: &Path) -> Result<RgbImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => RgbImage::load_png(path),
        Some("json") => RgbImage::from_planar(&Container::load(path)?.get::<f32>("image")?),
        _ => Err(CoreError::Image(format!("unknown raster type: {}", path.display()))),
    }
}
