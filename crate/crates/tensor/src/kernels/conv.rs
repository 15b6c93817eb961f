//! Grouped, dilated 2-D cross-correlation over `N×C×H×W` batches.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{shape_str, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// `floor((n + 2·pad − dilation·(k−1) − 1)/stride) + 1`, or `None` when not
    /// even one output position fits.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    pub fn validate(&self, in_ch: usize, out_ch: usize) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(TensorError::invalid(
                "conv2d",
                "stride, dilation and groups must be positive",
            ));
        }
        if !in_ch.is_multiple_of(self.groups) || !out_ch.is_multiple_of(self.groups) {
            return Err(TensorError::invalid(
                "conv2d",
                format!(
                    "groups {} must divide in_ch {in_ch} and out_ch {out_ch}",
                    self.groups
                ),
            ));
        }
        Ok(())
    }
}

/// A convolution's weights together with its geometry.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    /// `out_ch × in_ch/groups × k × k`
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> ConvParams<T> {
    pub fn in_channels(&self) -> usize {
        self.kernel.dim(1) * self.geometry.groups
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dim(0)
    }
}

/// Single-image convolution `C_in×H×W → C_out×H_out×W_out`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    x.expect_ndim("conv2d", 3)?;
    let batched = x.clone().unsqueeze0();
    let y = conv2d_forward(&batched, &p.kernel, p.bias.as_ref(), p.geometry)?;
    let shape = y.shape()[1..].to_vec();
    y.reshape(shape)
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvDims {
    fn cin_g(&self, geom: ConvGeometry) -> usize {
        self.cin / geom.groups
    }
    fn cout_g(&self, geom: ConvGeometry) -> usize {
        self.cout / geom.groups
    }
    fn col_rows(&self, geom: ConvGeometry) -> usize {
        self.cin_g(geom) * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.hout * self.wout
    }
    fn is_pointwise(&self, geom: ConvGeometry) -> bool {
        self.k == 1 && geom.stride == 1 && geom.padding == 0
    }
}

pub(crate) fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<ConvDims> {
    x.expect_ndim("conv2d", 4)?;
    weight.expect_ndim("conv2d", 4)?;
    let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, cin_g, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if kh != kw {
        return Err(TensorError::invalid("conv2d", "only square kernels supported"));
    }
    geom.validate(cin_g * geom.groups, cout)?;
    if cin_g * geom.groups != cin {
        return Err(TensorError::shape(
            "conv2d",
            format!("{} input channels", cin_g * geom.groups),
            shape_str(x.shape()),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::shape("conv2d", format!("bias [{cout}]"), shape_str(b.shape())));
        }
    }
    let hout = geom.output_extent(h, kh);
    let wout = geom.output_extent(w, kw);
    match (hout, wout) {
        (Some(hout), Some(wout)) => Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            hout,
            wout,
        }),
        _ => Err(TensorError::invalid(
            "conv2d",
            format!("input {h}×{w} too small for kernel {kh} with {geom:?}"),
        )),
    }
}

/// Unfold group `g` of one image into rows `cin_g·k·k` of `cols`, writing
/// the `hout·wout` positions of each row at `row·ld + off`.
fn im2col<T: Scalar>(img: &[T], d: &ConvDims, geom: ConvGeometry, g: usize, cols: &mut [T], ld: usize, off: usize) {
    let cin_g = d.cin_g(geom);
    let p = d.positions();
    let (s, pad, dil) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for c in 0..cin_g {
        let plane = &img[(g * cin_g + c) * d.h * d.w..][..d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let out = &mut cols[row * ld + off..][..p];
                for oy in 0..d.hout {
                    let iy = oy as isize * s + ki as isize * dil - pad;
                    let dst = &mut out[oy * d.wout..][..d.wout];
                    if iy < 0 || iy >= d.h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..][..d.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kj as isize * dil - pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image gradient.
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, geom: ConvGeometry, g: usize, img: &mut [T], ld: usize, off: usize) {
    let cin_g = d.cin_g(geom);
    let p = d.positions();
    let (s, pad, dil) = (geom.stride as isize, geom.padding as isize, geom.dilation as isize);
    for c in 0..cin_g {
        let plane = &mut img[(g * cin_g + c) * d.h * d.w..][..d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &cols[row * ld + off..][..p];
                for oy in 0..d.hout {
                    let iy = oy as isize * s + ki as isize * dil - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..][..d.w];
                    for ox in 0..d.wout {
                        let ix = ox as isize * s + kj as isize * dil - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Upper bound on unfolded elements per chunk of images.
const COL_BUDGET: usize = 1 << 21;

/// Images per chunk: layers with few output positions unfold several
/// images side by side so each group runs one wide product.
fn images_per_chunk(d: &ConvDims, geom: ConvGeometry) -> usize {
    (COL_BUDGET / (d.col_rows(geom) * d.positions()).max(1)).clamp(1, d.n.max(1))
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x, weight, bias, geom)?;
    let in_sz = d.cin * d.h * d.w;
    let out_sz = d.cout * d.positions();
    let mut out = vec![T::ZERO; d.n * out_sz];
    let (cin_g, cout_g, rows, p) = (d.cin_g(geom), d.cout_g(geom), d.col_rows(geom), d.positions());
    let xs = x.data();
    let ws = weight.data();
    let nb = images_per_chunk(&d, geom);
    out.par_chunks_mut((nb * out_sz).max(1))
        .enumerate()
        .for_each(|(ci, dst)| {
            let n0 = ci * nb;
            let cnt = dst.len() / out_sz.max(1);
            if cnt == 1 {
                let img = &xs[n0 * in_sz..][..in_sz];
                let mut cols = if d.is_pointwise(geom) { Vec::new() } else { vec![T::ZERO; rows * p] };
                for g in 0..geom.groups {
                    let wg = &ws[g * cout_g * rows..][..cout_g * rows];
                    let og = &mut dst[g * cout_g * p..][..cout_g * p];
                    if d.is_pointwise(geom) {
                        let src = &img[g * cin_g * p..][..cin_g * p];
                        gemm(cout_g, rows, p, wg, false, src, false, og, false);
                    } else {
                        im2col(img, &d, geom, g, &mut cols, p, 0);
                        gemm(cout_g, rows, p, wg, false, &cols, false, og, false);
                    }
                }
            } else {
                let q = cnt * p;
                let mut cols = vec![T::ZERO; rows * q];
                let mut prod = vec![T::ZERO; cout_g * q];
                for g in 0..geom.groups {
                    for j in 0..cnt {
                        im2col(&xs[(n0 + j) * in_sz..][..in_sz], &d, geom, g, &mut cols, q, j * p);
                    }
                    let wg = &ws[g * cout_g * rows..][..cout_g * rows];
                    gemm(cout_g, rows, q, wg, false, &cols, false, &mut prod, false);
                    for j in 0..cnt {
                        for co in 0..cout_g {
                            dst[j * out_sz + (g * cout_g + co) * p..][..p].copy_from_slice(&prod[co * q + j * p..][..p]);
                        }
                    }
                }
            }
            if let Some(b) = bias {
                for img in dst.chunks_mut(out_sz.max(1)) {
                    for (c, &bv) in b.data().iter().enumerate() {
                        for v in &mut img[c * p..][..p] {
                            *v += bv;
                        }
                    }
                }
            }
        });
    Tensor::from_vec([d.n, d.cout, d.hout, d.wout], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let d = conv_dims(x, weight, None, geom)?;
    let in_sz = d.cin * d.h * d.w;
    let out_sz = d.cout * d.positions();
    let (cout_g, rows, p) = (d.cout_g(geom), d.col_rows(geom), d.positions());
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();
    let [need_x, need_w, need_b] = need;
    let nb = images_per_chunk(&d, geom);
    let chunks = d.n.div_ceil(nb);

    let per_chunk: Vec<(Vec<T>, Vec<T>)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let n0 = ci * nb;
            let cnt = nb.min(d.n - n0);
            let q = cnt * p;
            let mut dx = if need_x { vec![T::ZERO; cnt * in_sz] } else { Vec::new() };
            let mut dw = if need_w { vec![T::ZERO; weight.len()] } else { Vec::new() };
            let mut cols = vec![T::ZERO; rows * q];
            let mut gyb = vec![T::ZERO; cout_g * q];
            for g in 0..geom.groups {
                for j in 0..cnt {
                    for co in 0..cout_g {
                        gyb[co * q + j * p..][..p].copy_from_slice(&gs[(n0 + j) * out_sz + (g * cout_g + co) * p..][..p]);
                    }
                }
                if need_w {
                    for j in 0..cnt {
                        im2col(&xs[(n0 + j) * in_sz..][..in_sz], &d, geom, g, &mut cols, q, j * p);
                    }
                    let dwg = &mut dw[g * cout_g * rows..][..cout_g * rows];
                    gemm(cout_g, q, rows, &gyb, false, &cols, true, dwg, false);
                }
                if need_x {
                    let wg = &ws[g * cout_g * rows..][..cout_g * rows];
                    gemm(rows, cout_g, q, wg, true, &gyb, false, &mut cols, false);
                    for j in 0..cnt {
                        col2im(&cols, &d, geom, g, &mut dx[j * in_sz..][..in_sz], q, j * p);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let input = if need_x {
        let mut all = Vec::with_capacity(d.n * in_sz);
        for (dx, _) in &per_chunk {
            all.extend_from_slice(dx);
        }
        Some(Tensor::from_vec(x.shape().to_vec(), all)?)
    } else {
        None
    };
    let weight_grad = if need_w {
        let mut acc = vec![T::ZERO; weight.len()];
        for (_, dw) in &per_chunk {
            for (a, &v) in acc.iter_mut().zip(dw) {
                *a += v;
            }
        }
        Some(Tensor::from_vec(weight.shape().to_vec(), acc)?)
    } else {
        None
    };
    let bias = if has_bias && need_b {
        let mut acc = vec![T::ZERO; d.cout];
        for n in 0..d.n {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += gs[n * out_sz + c * p..][..p].iter().copied().sum::<T>();
            }
        }
        Some(Tensor::from_vec([d.cout], acc)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: weight_grad,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as an independent reference.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, g: ConvGeometry) -> Tensor<f64> {
        let d = conv_dims(x, w, b, g).unwrap();
        let (cin_g, cout_g) = (d.cin / g.groups, d.cout / g.groups);
        let mut out = Tensor::zeros([d.n, d.cout, d.hout, d.wout]);
        for n in 0..d.n {
            for co in 0..d.cout {
                let grp = co / cout_g;
                for oy in 0..d.hout {
                    for ox in 0..d.wout {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin_g {
                            for ki in 0..d.k {
                                for kj in 0..d.k {
                                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xi = ((n * d.cin + grp * cin_g + ci) * d.h + iy as usize) * d.w + ix as usize;
                                    let wi = ((co * cin_g + ci) * d.k + ki) * d.k + kj;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((n * d.cout + co) * d.hout + oy) * d.wout + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        }
    }

    #[test]
    fn all_ones_three_by_three() {
        let x = Tensor::<f64>::ones([1, 3, 3]);
        let p = ConvParams {
            kernel: Tensor::ones([1, 1, 3, 3]),
            bias: None,
            geometry: ConvGeometry::new(1, 1, 1, 1),
        };
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(y.data()[corner], 4.0);
        }
    }

    #[test]
    fn dilated_impulse_response() {
        let mut x = Tensor::<f64>::zeros([1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let p = ConvParams {
            kernel: Tensor::ones([1, 1, 3, 3]),
            bias: None,
            geometry: ConvGeometry::new(1, 2, 2, 1),
        };
        let y = conv2d(&x, &p).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let dy = r as isize - 4;
                let dx = c as isize - 4;
                let on = [-2, 0, 2].contains(&dy) && [-2, 0, 2].contains(&dx);
                assert_eq!(y.data()[r * 9 + c] != 0.0, on, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn depthwise_zero_channel_yields_bias() {
        let mut x = Tensor::<f64>::from_fn([3, 5, 5], lcg(3));
        x.data_mut()[..25].fill(0.0);
        let p = ConvParams {
            kernel: Tensor::from_fn([3, 1, 3, 3], lcg(4)),
            bias: Some(Tensor::from_vec([3], vec![0.25, -1.0, 2.0]).unwrap()),
            geometry: ConvGeometry::new(1, 1, 1, 3),
        };
        let y = conv2d(&x, &p).unwrap();
        assert!(y.data()[..25].iter().all(|&v| v == 0.25));
    }

    #[test]
    fn groups_must_divide_channels() {
        let x = Tensor::<f64>::zeros([1, 6, 4, 4]);
        let w = Tensor::<f64>::zeros([4, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, ConvGeometry::new(1, 1, 1, 4)).is_err());
        let w = Tensor::<f64>::zeros([4, 4, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, ConvGeometry::new(1, 1, 1, 1)).is_err());
    }

    #[test]
    fn matches_naive_over_geometry_grid() {
        let mut seed = 10;
        for &(cin, cout, groups) in &[(4, 6, 1), (4, 4, 2), (6, 6, 3), (4, 4, 4)] {
            for k in [1, 3, 4] {
                for stride in [1, 2, 4] {
                    for pad in [0, 1, 2] {
                        for dil in [1, 2] {
                            let g = ConvGeometry::new(stride, pad, dil, groups);
                            if g.output_extent(7, k).is_none() {
                                continue;
                            }
                            seed += 1;
                            let x = Tensor::from_fn([2, cin, 7, 7], lcg(seed));
                            let w = Tensor::from_fn([cout, cin / groups, k, k], lcg(seed + 1000));
                            let b = Tensor::from_fn([cout], lcg(seed + 2000));
                            let got = conv2d_forward(&x, &w, Some(&b), g).unwrap();
                            let want = naive(&x, &w, Some(&b), g);
                            assert_eq!(got.shape(), want.shape());
                            let expect_h = (7 + 2 * pad - dil * (k - 1) - 1) / stride + 1;
                            assert_eq!(got.dim(2), expect_h);
                            for (a, b) in got.data().iter().zip(want.data()) {
                                assert!((a - b).abs() < 1e-12, "{g:?} k={k}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_in_input() {
        let g = ConvGeometry::new(2, 1, 2, 2);
        let x = Tensor::from_fn([1, 4, 6, 6], lcg(1));
        let y = Tensor::from_fn([1, 4, 6, 6], lcg(2));
        let w = Tensor::from_fn([4, 2, 3, 3], lcg(3));
        let (a, b) = (1.7, -0.3);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d_forward(&mix, &w, None, g).unwrap();
        let rhs = conv2d_forward(&x, &w, None, g)
            .unwrap()
            .scale(a)
            .add(&conv2d_forward(&y, &w, None, g).unwrap().scale(b))
            .unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
