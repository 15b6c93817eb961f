//! Batch and layer normalization kernels.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Tensor};

/// Statistics saved by a training-mode batch norm for its backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Channel count and the number of elements per channel of an `N×C` or
/// `N×C×H×W` tensor.
fn bn_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, h, w] => Ok((*n, *c, h * w)),
        s => Err(TensorError::shape("batch_norm", "N×C or N×C×H×W", shape_str(s))),
    }
}

fn check_affine<T: Scalar>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::shape(op, format!("affine [{c}]"), shape_str(gamma.shape())));
    }
    Ok(())
}

fn inv_std<T: Scalar>(op: &'static str, var: f64, eps: f64) -> Result<T> {
    let denom = var + eps;
    if denom.is_nan() || denom <= 0.0 {
        return Err(TensorError::invalid(op, format!("non-positive variance + epsilon ({denom})")));
    }
    Ok(T::from_f64(1.0 / denom.sqrt()))
}

/// Per-channel `(mean, biased variance)` over batch and spatial axes.
pub fn batch_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, c, hw) = bn_layout(x)?;
    let m = n * hw;
    if m == 0 {
        return Err(TensorError::invalid("batch_norm", "empty batch"));
    }
    let xs = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += xs[(b * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()).sum::<f64>();
        }
        let mu = s / m as f64;
        let mut q = 0.0;
        for b in 0..n {
            q += xs[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|v| (v.to_f64() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = q / m as f64;
    }
    Ok((mean, var, m))
}

/// Normalize with the given per-channel mean/variance and apply the affine map.
pub fn batch_norm_apply<T: Scalar>(
    x: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, hw) = bn_layout(x)?;
    check_affine("batch_norm", c, gamma, beta)?;
    let inv: Vec<T> = var
        .iter()
        .map(|&v| inv_std("batch_norm", v, eps))
        .collect::<Result<_>>()?;
    let mut y = x.clone();
    let mut xhat = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let mu = T::from_f64(mean[ch]);
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let h = (x.data()[i] - mu) * inv[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = h * g + be;
            }
        }
    }
    Ok((y, NormCache { xhat, inv_std: inv }))
}

pub struct AffineNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward of batch norm. With `batch_stats` the mean and variance are
/// functions of the input (training mode); otherwise they are constants.
pub fn batch_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    batch_stats: bool,
) -> Result<AffineNormGrads<T>> {
    let (n, c, hw) = bn_layout(grad)?;
    let m = T::from_f64((n * hw) as f64);
    let mut dx = grad.clone();
    let mut dgamma = vec![T::ZERO; c];
    let mut dbeta = vec![T::ZERO; c];
    let (gs, xh) = (grad.data(), cache.xhat.data());
    for ch in 0..c {
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_d += gs[i];
                sum_dx += gs[i] * xh[i];
            }
        }
        dgamma[ch] = sum_dx;
        dbeta[ch] = sum_d;
        let g = gamma.data()[ch];
        let inv = cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dx.data_mut()[i] = if batch_stats {
                    // dxhat = dy·γ; dx = inv/m · (m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    g * inv / m * (m * gs[i] - sum_d - xh[i] * sum_dx)
                } else {
                    gs[i] * g * inv
                };
            }
        }
    }
    Ok(AffineNormGrads {
        input: dx,
        gamma: Tensor::from_vec([c], dgamma)?,
        beta: Tensor::from_vec([c], dbeta)?,
    })
}

/// Layer norm over the last axis.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
    check_affine("layer_norm", d, gamma, beta)?;
    let mut y = x.clone();
    let mut xhat = x.clone();
    let mut invs = Vec::with_capacity(x.len() / d.max(1));
    for (r, row) in x.data().chunks(d).enumerate() {
        let mu = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mu).powi(2)).sum::<f64>() / d as f64;
        let inv: T = inv_std("layer_norm", var, eps)?;
        let mu = T::from_f64(mu);
        for j in 0..d {
            let h = (row[j] - mu) * inv;
            xhat.data_mut()[r * d + j] = h;
            y.data_mut()[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
        invs.push(inv);
    }
    Ok((y, NormCache { xhat, inv_std: invs }))
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<AffineNormGrads<T>> {
    let d = gamma.len();
    let m = T::from_f64(d as f64);
    let mut dx = grad.clone();
    let mut dgamma = vec![T::ZERO; d];
    let mut dbeta = vec![T::ZERO; d];
    for (r, (grow, xrow)) in grad.data().chunks(d).zip(cache.xhat.data().chunks(d)).enumerate() {
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for j in 0..d {
            let dh = grow[j] * gamma.data()[j];
            sum_d += dh;
            sum_dx += dh * xrow[j];
            dgamma[j] += grow[j] * xrow[j];
            dbeta[j] += grow[j];
        }
        let inv = cache.inv_std[r];
        for j in 0..d {
            let dh = grow[j] * gamma.data()[j];
            dx.data_mut()[r * d + j] = inv / m * (m * dh - sum_d - xrow[j] * sum_dx);
        }
    }
    Ok(AffineNormGrads {
        input: dx,
        gamma: Tensor::from_vec([d], dgamma)?,
        beta: Tensor::from_vec([d], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let x = Tensor::<f64>::full([2, 6], 3.25);
        let (y, _) = layer_norm_forward(&x, &Tensor::ones([6]), &Tensor::zeros([6]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_with_unit_running_stats_is_identity() {
        let x = Tensor::<f64>::from_fn([3, 4, 2, 2], |i| (i as f64 * 0.37).cos());
        let (y, _) = batch_norm_apply(
            &x,
            &[0.0; 4],
            &[1.0; 4],
            &Tensor::ones([4]),
            &Tensor::zeros([4]),
            0.0,
        )
        .unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn nonpositive_variance_is_rejected() {
        let x = Tensor::<f64>::zeros([2, 1]);
        let r = batch_norm_apply(&x, &[0.0], &[-1.0], &Tensor::ones([1]), &Tensor::zeros([1]), 1e-5);
        assert!(r.is_err());
    }
}
