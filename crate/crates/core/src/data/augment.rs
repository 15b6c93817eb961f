//! Seeded augmentation suite. Ops run in a fixed order (brightness,
//! contrast, color, sharpness, blur, flip, rotate, noise), each enabled
//! independently with probability `p`.
//!
//! Enhancement ops blend the image with a degenerate version:
//! `out = d + f·(img − d)` where `d` is black (brightness), the mean
//! luminance (contrast), the per-pixel luminance (color) or the 3×3 smoothed
//! image (sharpness). Factor 1 is the identity in all four.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use efcm_tensor::derive_seed;

use super::image::RgbImage;
use crate::error::{config, Result};

pub const BRIGHTNESS: [f64; 4] = [0.5, 0.7, 1.3, 1.5];
pub const CONTRAST: [f64; 4] = [0.5, 0.8, 1.2, 1.5];
pub const COLOR: [f64; 4] = [0.5, 0.8, 1.2, 1.5];
pub const SHARPNESS: [f64; 4] = [0.5, 0.8, 1.2, 1.5];
pub const BLUR_RADII: [u32; 3] = [1, 2, 3];
pub const FLIPS: [Flip; 2] = [Flip::LeftRight, Flip::TopBottom];
pub const ROTATIONS: [i32; 6] = [-45, -30, -15, 15, 30, 45];
pub const NOISE_STD: [f64; 2] = [0.05, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flip {
    LeftRight,
    TopBottom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "param", rename_all = "snake_case")]
pub enum AugOp {
    Brightness(f64),
    Contrast(f64),
    Color(f64),
    Sharpness(f64),
    GaussianBlur(u32),
    Flip(Flip),
    /// Degrees, counterclockwise.
    Rotate(i32),
    Noise(f64),
}

/// Enabled ops and their parameter sets. An empty set disables the op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub probability: f64,
    pub brightness: Vec<f64>,
    pub contrast: Vec<f64>,
    pub color: Vec<f64>,
    pub sharpness: Vec<f64>,
    pub blur_radii: Vec<u32>,
    pub flips: Vec<Flip>,
    pub rotations: Vec<i32>,
    pub noise_std: Vec<f64>,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            probability: 0.5,
            brightness: BRIGHTNESS.to_vec(),
            contrast: CONTRAST.to_vec(),
            color: COLOR.to_vec(),
            sharpness: SHARPNESS.to_vec(),
            blur_radii: BLUR_RADII.to_vec(),
            flips: FLIPS.to_vec(),
            rotations: ROTATIONS.to_vec(),
            noise_std: NOISE_STD.to_vec(),
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            probability: 0.0,
            brightness: vec![],
            contrast: vec![],
            color: vec![],
            sharpness: vec![],
            blur_radii: vec![],
            flips: vec![],
            rotations: vec![],
            noise_std: vec![],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(config(format!("augmentation probability {} outside [0, 1]", self.probability)));
        }
        fn subset<T: PartialEq + std::fmt::Debug>(name: &str, got: &[T], allowed: &[T]) -> Result<()> {
            match got.iter().find(|v| !allowed.contains(v)) {
                Some(v) => Err(config(format!("{name} parameter {v:?} is not one of {allowed:?}"))),
                None => Ok(()),
            }
        }
        subset("brightness", &self.brightness, &BRIGHTNESS)?;
        subset("contrast", &self.contrast, &CONTRAST)?;
        subset("color", &self.color, &COLOR)?;
        subset("sharpness", &self.sharpness, &SHARPNESS)?;
        subset("gaussian blur", &self.blur_radii, &BLUR_RADII)?;
        subset("flip", &self.flips, &FLIPS)?;
        subset("rotate", &self.rotations, &ROTATIONS)?;
        subset("noise", &self.noise_std, &NOISE_STD)
    }
}

/// True when `op` carries a parameter from the allowed set (factor 1.0 is
/// accepted for enhancement ops as the explicit identity).
pub fn op_is_allowed(op: &AugOp) -> bool {
    let enh = |f: f64, set: &[f64]| f == 1.0 || set.contains(&f);
    match *op {
        AugOp::Brightness(f) => enh(f, &BRIGHTNESS),
        AugOp::Contrast(f) => enh(f, &CONTRAST),
        AugOp::Color(f) => enh(f, &COLOR),
        AugOp::Sharpness(f) => enh(f, &SHARPNESS),
        AugOp::GaussianBlur(r) => BLUR_RADII.contains(&r),
        AugOp::Flip(f) => FLIPS.contains(&f),
        AugOp::Rotate(a) => ROTATIONS.contains(&a),
        AugOp::Noise(s) => NOISE_STD.contains(&s),
    }
}

/// Draw the op list for one image.
pub fn sample_ops(spec: &AugmentSpec, rng: &mut impl Rng) -> Vec<AugOp> {
    let mut ops = Vec::new();
    let p = spec.probability;
    macro_rules! draw {
        ($set:expr, $ctor:expr) => {
            if !$set.is_empty() && rng.random_bool(p) {
                ops.push($ctor($set[rng.random_range(0..$set.len())]));
            }
        };
    }
    draw!(spec.brightness, AugOp::Brightness);
    draw!(spec.contrast, AugOp::Contrast);
    draw!(spec.color, AugOp::Color);
    draw!(spec.sharpness, AugOp::Sharpness);
    draw!(spec.blur_radii, AugOp::GaussianBlur);
    draw!(spec.flips, AugOp::Flip);
    draw!(spec.rotations, AugOp::Rotate);
    draw!(spec.noise_std, AugOp::Noise);
    ops
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: RgbImage,
    pub ops: Vec<AugOp>,
}

pub fn augment(img: &RgbImage, spec: &AugmentSpec, seed: u64) -> Result<Augmented> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA116));
    let ops = sample_ops(spec, &mut rng);
    let mut image = img.clone();
    for op in &ops {
        image = apply_op(&image, op, &mut rng)?;
    }
    Ok(Augmented { image, ops })
}

pub fn apply_op(img: &RgbImage, op: &AugOp, rng: &mut impl Rng) -> Result<RgbImage> {
    if !op_is_allowed(op) {
        return Err(config(format!("augmentation {op:?} uses a parameter outside the allowed set")));
    }
    Ok(match *op {
        AugOp::Brightness(f) => brightness(img, f),
        AugOp::Contrast(f) => contrast(img, f),
        AugOp::Color(f) => color(img, f),
        AugOp::Sharpness(f) => sharpness(img, f),
        AugOp::GaussianBlur(r) => gaussian_blur(img, r as f64),
        AugOp::Flip(f) => flip(img, f),
        AugOp::Rotate(a) => rotate(img, a as f64),
        AugOp::Noise(s) => noise(img, s, rng),
    })
}

fn luma(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn blend(img: &RgbImage, degenerate: impl Fn(usize) -> f32, f: f64) -> RgbImage {
    if f == 1.0 {
        return img.clone();
    }
    let f = f as f32;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let d = degenerate(i);
            (d + f * (v - d)).clamp(0.0, 1.0)
        })
        .collect();
    RgbImage { data, ..*img }
}

pub fn brightness(img: &RgbImage, f: f64) -> RgbImage {
    blend(img, |_| 0.0, f)
}

pub fn contrast(img: &RgbImage, f: f64) -> RgbImage {
    let n = (img.width * img.height).max(1);
    let mean = img.data.chunks_exact(3).map(|p| luma(p) as f64).sum::<f64>() / n as f64;
    blend(img, |_| mean as f32, f)
}

pub fn color(img: &RgbImage, f: f64) -> RgbImage {
    let gray: Vec<f32> = img.data.chunks_exact(3).map(luma).collect();
    blend(img, |i| gray[i / 3], f)
}

/// Blend toward the `[[1,1,1],[1,5,1],[1,1,1]]/13` smoothed image; border
/// pixels keep their value in the smoothed image.
pub fn sharpness(img: &RgbImage, f: f64) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let mut smooth = img.data.clone();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        s += wgt * img.data[((y + dy - 1) * w + x + dx - 1) * 3 + c];
                    }
                }
                smooth[(y * w + x) * 3 + c] = s / 13.0;
            }
        }
    }
    blend(img, |i| smooth[i], f)
}

/// Separable Gaussian with `σ = radius`, truncated at `3σ`, edges clamped.
pub fn gaussian_blur(img: &RgbImage, radius: f64) -> RgbImage {
    let half = (3.0 * radius).ceil() as isize;
    let kernel: Vec<f32> = {
        let raw: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * radius * radius)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| (v / s) as f32).collect()
    };
    let (w, h) = (img.width as isize, img.height as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0f32; 3];
                for (k, &kw) in kernel.iter().enumerate() {
                    let o = k as isize - half;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    let i = ((sy * w + sx) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += kw * src[i + c];
                    }
                }
                let i = ((y * w + x) * 3) as usize;
                out[i..i + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    let data = pass(&pass(&img.data, true), false);
    RgbImage { data, ..*img }
}

pub fn flip(img: &RgbImage, f: Flip) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = match f {
                Flip::LeftRight => (w - 1 - x, y),
                Flip::TopBottom => (x, h - 1 - y),
            };
            out.set(x, y, img.get(sx, sy));
        }
    }
    out
}

/// Counterclockwise rotation about the center, bilinear, same canvas size;
/// samples falling outside the source are white.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let (s, c) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let tap = |x: isize, y: isize| -> [f32; 3] {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            [1.0; 3]
        } else {
            img.get(x as usize, y as usize)
        }
    };
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cx + c * dx - s * dy;
            let sy = cy + s * dx + c * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let (p00, p10, p01, p11) = (tap(x0, y0), tap(x0 + 1, y0), tap(x0, y0 + 1), tap(x0 + 1, y0 + 1));
            let mut v = [0f32; 3];
            for ch in 0..3 {
                let top = p00[ch] + fx * (p10[ch] - p00[ch]);
                let bot = p01[ch] + fx * (p11[ch] - p01[ch]);
                v[ch] = top + fy * (bot - top);
            }
            out.set(x, y, v);
        }
    }
    out
}

/// Additive Gaussian noise, clamped to [0, 1].
pub fn noise(img: &RgbImage, std: f64, rng: &mut impl Rng) -> RgbImage {
    let normal = Normal::new(0.0f32, std as f32).expect("std drawn from a positive set");
    let data = img.data.iter().map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0)).collect();
    RgbImage { data, ..*img }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn identity_factors() {
        let img = ramp(7, 5);
        assert_eq!(brightness(&img, 1.0), img);
        assert_eq!(contrast(&img, 1.0), img);
        assert_eq!(color(&img, 1.0), img);
        assert_eq!(sharpness(&img, 1.0), img);
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(6, 4);
        for f in FLIPS {
            assert_ne!(flip(&img, f), img);
            assert_eq!(flip(&flip(&img, f), f), img);
        }
    }

    #[test]
    fn blend_oracles() {
        let img = RgbImage::new(1, 1, vec![0.2, 0.4, 0.6]).unwrap();
        assert_eq!(brightness(&img, 0.5).data, vec![0.1, 0.2, 0.3]);
        let gray = RgbImage::filled(3, 3, [0.4; 3]);
        let close = |a: &RgbImage| a.data.iter().all(|v| (v - 0.4).abs() < 1e-6);
        assert!(close(&color(&gray, 1.5)));
        assert!(close(&sharpness(&gray, 0.5)));
        assert!(close(&contrast(&gray, 1.5)));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = RgbImage::filled(9, 9, [0.3, 0.5, 0.7]);
        let b = gaussian_blur(&img, 2.0);
        assert!(b.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn quarter_turn_moves_bottom_to_right() {
        let mut img = RgbImage::filled(3, 3, [0.0; 3]);
        img.set(1, 2, [1.0, 0.5, 0.25]);
        let r = rotate(&img, 90.0);
        let v = r.get(2, 1);
        assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn out_of_set_parameters_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ramp(4, 4);
        assert!(apply_op(&img, &AugOp::Rotate(10), &mut rng).is_err());
        assert!(apply_op(&img, &AugOp::Brightness(0.9), &mut rng).is_err());
        assert!(apply_op(&img, &AugOp::GaussianBlur(4), &mut rng).is_err());
        let bad = AugmentSpec {
            noise_std: vec![0.2],
            ..Default::default()
        };
        assert!(augment(&img, &bad, 0).is_err());
    }

    #[test]
    fn seeded_augmentation_is_deterministic() {
        let img = ramp(16, 16);
        let spec = AugmentSpec::default();
        let a = augment(&img, &spec, 11).unwrap();
        let b = augment(&img, &spec, 11).unwrap();
        assert_eq!(a.ops, b.ops);
        assert_eq!(a.image, b.image);
    }
}
