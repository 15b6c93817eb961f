//! Resize and per-channel mean subtraction.

use efcm_tensor::Tensor;

use super::image::RgbImage;
use crate::error::{CoreError, Result};

pub const DEFAULT_INPUT: usize = 224;

/// Bilinear resize with half-pixel centers and clamped edges. Same-size
/// input is returned unchanged.
pub fn resize_bilinear(img: &RgbImage, width: usize, height: usize) -> RgbImage {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let (sw, sh) = (img.width as f64, img.height as f64);
    let axis = |o: usize, src: f64, dst: usize| {
        let s = ((o as f64 + 0.5) * src / dst as f64 - 0.5).clamp(0.0, src - 1.0);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src as usize - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, sw, width)).collect();
    let mut out = RgbImage::filled(width, height, [0.0; 3]);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sh, height);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let (a, b, c, d) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut v = [0f32; 3];
            for ch in 0..3 {
                let top = a[ch] + fx * (b[ch] - a[ch]);
                let bot = c[ch] + fx * (d[ch] - c[ch]);
                v[ch] = top + fy * (bot - top);
            }
            out.set(x, y, v);
        }
    }
    out
}

/// Per-channel pixel means over a set of images.
pub fn channel_means<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<[f64; 3]> {
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for img in images {
        for p in img.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
        n += img.width * img.height;
    }
    if n == 0 {
        return Err(CoreError::Missing("no pixels to average".into()));
    }
    Ok(sum.map(|s| s / n as f64))
}

/// `3×size×size` planar tensor: resized, then mean-subtracted.
pub fn preprocess(img: &RgbImage, size: usize, means: [f64; 3]) -> Result<Tensor<f32>> {
    if img.width == 0 || img.height == 0 || size == 0 {
        return Err(CoreError::Shape(format!("cannot resize {}×{} to {size}", img.width, img.height)));
    }
    let r = resize_bilinear(img, size, size);
    let mut t = r.to_planar();
    let hw = size * size;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v -= means[i / hw] as f32;
    }
    Ok(t)
}

/// Decoded raster of any color type; non-RGB input is an error.
pub fn preprocess_dynamic(img: &image::DynamicImage, size: usize, means: [f64; 3]) -> Result<Tensor<f32>> {
    preprocess(&RgbImage::from_dynamic(img)?, size, means)
}

/// `N×3×size×size`.
pub fn preprocess_batch(images: &[RgbImage], size: usize, means: [f64; 3]) -> Result<Tensor<f32>> {
    let parts = images.iter().map(|i| preprocess(i, size, means)).collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for p in &parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_vec([images.len(), 3, size, size], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_bit_exact() {
        let img = RgbImage::new(2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 2, 2), img);
        let t = preprocess(&img, 2, [0.0; 3]).unwrap();
        assert_eq!(t, img.to_planar());
    }

    #[test]
    fn upsampling_oracle() {
        let img = RgbImage::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = resize_bilinear(&img, 4, 1);
        let red: Vec<f32> = (0..4).map(|x| r.get(x, 0)[0]).collect();
        assert_eq!(red, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn output_shape_and_mean_subtraction() {
        let img = RgbImage::filled(300, 180, [0.6, 0.3, 0.9]);
        let means = channel_means([&img]).unwrap();
        let t = preprocess(&img, DEFAULT_INPUT, means).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
        assert!(t.max_abs() < 1e-6);
    }

    #[test]
    fn grayscale_input_is_rejected() {
        let g = image::DynamicImage::ImageLuma8(image::GrayImage::new(8, 8));
        assert!(preprocess_dynamic(&g, 8, [0.0; 3]).is_err());
    }
}
