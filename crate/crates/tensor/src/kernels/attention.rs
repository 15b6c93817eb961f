//! Fused scaled dot-product self-attention over packed `q|k|v` projections.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{shape_str, Tensor};

fn dims<T: Scalar>(qkv: &Tensor<T>, heads: usize) -> Result<(usize, usize, usize, usize)> {
    qkv.expect_ndim("attention", 3)?;
    let (b, l, three_c) = (qkv.dim(0), qkv.dim(1), qkv.dim(2));
    if three_c % 3 != 0 {
        return Err(TensorError::shape("attention", "last axis 3·C", shape_str(qkv.shape())));
    }
    let c = three_c / 3;
    if heads == 0 || c % heads != 0 {
        return Err(TensorError::invalid(
            "attention",
            format!("embedding width {c} not divisible by {heads} heads"),
        ));
    }
    Ok((b, l, c, heads))
}

/// Copy head `h` of projection `which` (0 = q, 1 = k, 2 = v) into an `l×dh` matrix.
fn gather<T: Scalar>(src: &[T], l: usize, c: usize, dh: usize, which: usize, h: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(l * dh);
    for t in 0..l {
        let row = &src[t * 3 * c + which * c + h * dh..][..dh];
        out.extend_from_slice(row);
    }
    out
}

fn scatter<T: Scalar>(dst: &mut [T], m: &[T], l: usize, stride: usize, offset: usize, dh: usize) {
    for t in 0..l {
        dst[t * stride + offset..][..dh].copy_from_slice(&m[t * dh..][..dh]);
    }
}

/// Returns the attended values `B×L×C` and the attention probabilities
/// `B×heads×L×L` (each row sums to one).
pub fn attention_forward<T: Scalar>(qkv: &Tensor<T>, heads: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (b, l, c, heads) = dims(qkv, heads)?;
    let dh = c / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let src = qkv.data();
    let per_batch: Vec<(Vec<T>, Vec<T>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let s = &src[bi * l * 3 * c..][..l * 3 * c];
            let mut out = vec![T::ZERO; l * c];
            let mut probs = vec![T::ZERO; heads * l * l];
            for h in 0..heads {
                let q = gather(s, l, c, dh, 0, h);
                let k = gather(s, l, c, dh, 1, h);
                let v = gather(s, l, c, dh, 2, h);
                let p = &mut probs[h * l * l..][..l * l];
                gemm(l, dh, l, &q, false, &k, true, p, false);
                for row in p.chunks_mut(l) {
                    let mut mx = row[0] * scale;
                    for v in row.iter_mut() {
                        *v *= scale;
                        mx = Scalar::max(mx, *v);
                    }
                    let mut z = T::ZERO;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                let mut o = vec![T::ZERO; l * dh];
                gemm(l, l, dh, p, false, &v, false, &mut o, false);
                scatter(&mut out, &o, l, c, h * dh, dh);
            }
            (out, probs)
        })
        .collect();
    let mut out = Vec::with_capacity(b * l * c);
    let mut probs = Vec::with_capacity(b * heads * l * l);
    for (o, p) in per_batch {
        out.extend(o);
        probs.extend(p);
    }
    Ok((
        Tensor::from_vec([b, l, c], out)?,
        Tensor::from_vec([b, heads, l, l], probs)?,
    ))
}

pub fn attention_backward<T: Scalar>(
    qkv: &Tensor<T>,
    probs: &Tensor<T>,
    heads: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, l, c, heads) = dims(qkv, heads)?;
    let dh = c / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let src = qkv.data();
    let grads: Vec<Vec<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let s = &src[bi * l * 3 * c..][..l * 3 * c];
            let go = &grad_out.data()[bi * l * c..][..l * c];
            let mut dqkv = vec![T::ZERO; l * 3 * c];
            for h in 0..heads {
                let q = gather(s, l, c, dh, 0, h);
                let k = gather(s, l, c, dh, 1, h);
                let v = gather(s, l, c, dh, 2, h);
                let p = &probs.data()[(bi * heads + h) * l * l..][..l * l];
                let mut dout = Vec::with_capacity(l * dh);
                for t in 0..l {
                    dout.extend_from_slice(&go[t * c + h * dh..][..dh]);
                }
                // dV = Pᵀ dO
                let mut dv = vec![T::ZERO; l * dh];
                gemm(l, l, dh, p, true, &dout, false, &mut dv, false);
                // dP = dO Vᵀ
                let mut ds = vec![T::ZERO; l * l];
                gemm(l, dh, l, &dout, false, &v, true, &mut ds, false);
                // softmax adjoint, folded with the 1/√dh scale
                for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                let mut dq = vec![T::ZERO; l * dh];
                gemm(l, l, dh, &ds, false, &k, false, &mut dq, false);
                let mut dk = vec![T::ZERO; l * dh];
                gemm(l, l, dh, &ds, true, &q, false, &mut dk, false);
                scatter(&mut dqkv, &dq, l, 3 * c, h * dh, dh);
                scatter(&mut dqkv, &dk, l, 3 * c, c + h * dh, dh);
                scatter(&mut dqkv, &dv, l, 3 * c, 2 * c + h * dh, dh);
            }
            dqkv
        })
        .collect();
    Tensor::from_vec(qkv.shape().to_vec(), grads.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_attends_to_itself() {
        let qkv = Tensor::<f64>::from_fn([1, 1, 12], |i| i as f64 * 0.3 - 1.0);
        let (out, probs) = attention_forward(&qkv, 2).unwrap();
        assert_eq!(probs.data(), &[1.0, 1.0]);
        assert_eq!(out.data(), &qkv.data()[8..12]);
    }

    #[test]
    fn rows_sum_to_one() {
        let qkv = Tensor::<f64>::from_fn([2, 5, 24], |i| ((i * 37 % 11) as f64 - 5.0) * 0.4);
        let (_, probs) = attention_forward(&qkv, 4).unwrap();
        for row in probs.data().chunks(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let qkv = Tensor::<f64>::zeros([1, 2, 15]);
        assert!(attention_forward(&qkv, 2).is_err());
    }
}
