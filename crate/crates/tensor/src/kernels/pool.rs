use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean over the trailing spatial axes: `N×C×H×W → N×C`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_ndim("global_avg_pool", 4)?;
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    if hw == 0 {
        return Err(TensorError::invalid("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::from_f64(1.0 / hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec([n, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(shape: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let hw = shape[2] * shape[3];
    let inv = T::from_f64(1.0 / hw as f64);
    let mut out = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * inv, hw));
    }
    Tensor::from_vec(shape.to_vec(), out)
}

/// Max pooling with square window; returns the output and, for each output
/// element, the flat index of the winning input element.
pub fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    x.expect_ndim("max_pool2d", 4)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if stride == 0 || kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(TensorError::invalid("max_pool2d", "window does not fit input"));
    }
    let hout = (h + 2 * padding - kernel) / stride + 1;
    let wout = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * hout * wout);
    let mut arg = Vec::with_capacity(out.capacity());
    let xs = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..hout {
            for ox in 0..wout {
                let mut best = None::<(T, usize)>;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = xs[idx];
                        if best.is_none_or(|(b, _)| v > b) {
                            best = Some((v, idx));
                        }
                    }
                }
                let (v, idx) = best.expect("window intersects input");
                out.push(v);
                arg.push(idx);
            }
        }
    }
    Ok((Tensor::from_vec([n, c, hout, wout], out)?, arg))
}

pub fn max_pool_backward<T: Scalar>(shape: &[usize], argmax: &[usize], grad: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(shape.to_vec());
    let dst = out.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad.data()) {
        dst[idx] += g;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_two_by_two() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let x = Tensor::<f64>::full([2, 3, 4, 5], 0.7);
        let s = global_avg_pool_forward(&x).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn pooling_is_homogeneous() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 3], |i| (i as f64).sin());
        let a = global_avg_pool_forward(&x.scale(2.0)).unwrap();
        let b = global_avg_pool_forward(&x).unwrap().scale(2.0);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_spatial_extent_is_an_error() {
        let x = Tensor::<f64>::zeros([1, 2, 0, 3]);
        assert!(global_avg_pool_forward(&x).is_err());
    }

    #[test]
    fn max_pool_resnet_stem_shape() {
        let x = Tensor::<f32>::from_fn([1, 1, 8, 8], |i| i as f32);
        let (y, _) = max_pool_forward(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[15], 63.0);
    }
}
