use efcm_tensor::kernels::conv::{conv2d_forward, ConvParams};
use efcm_tensor::kernels::{attention, conv};
use efcm_tensor::{ConvGeometry, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

#[test]
fn conv_shape_formula_holds_on_the_used_grid() {
    for stride in 1..=4 {
        for pad in 0..=3 {
            for dil in 1..=2 {
                for k in [1, 3, 4, 7] {
                    for h in 1..=9 {
                        let geom = ConvGeometry::new(stride, pad, dil, 1);
                        let expect = (h + 2 * pad).checked_sub(dil * (k - 1) + 1).map(|v| v / stride + 1);
                        assert_eq!(geom.output_extent(h, k), expect);
                        if let Some(e) = expect {
                            let p = ConvParams {
                                kernel: Tensor::<f64>::ones([1, 1, k, k]),
                                bias: None,
                                geometry: geom,
                            };
                            let y = conv::conv2d(&Tensor::ones([1, h, h]), &p).unwrap();
                            assert_eq!(y.shape(), &[1, e, e]);
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, dil in 1usize..3, groups in 1usize..3) {
        let geom = ConvGeometry::new(1, dil, dil, groups);
        let x = tensor(vec![1, 2 * groups, 5, 5], seed);
        let y = tensor(vec![1, 2 * groups, 5, 5], seed ^ 1);
        let w = tensor(vec![groups * 3, 2, 3, 3], seed ^ 2);
        let combo = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d_forward(&combo, &w, None, geom).unwrap();
        let rhs = conv2d_forward(&x, &w, None, geom).unwrap().scale(a)
            .add(&conv2d_forward(&y, &w, None, geom).unwrap().scale(b)).unwrap();
        let err = lhs.sub(&rhs).unwrap().max_abs();
        prop_assert!(err < 1e-12, "{}", err);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>(), heads in 1usize..4, l in 1usize..6) {
        let qkv = tensor(vec![2, l, 3 * heads * 2], seed).scale(4.0);
        let (_, probs) = attention::attention_forward(&qkv, heads).unwrap();
        for row in probs.data().chunks(l) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), l in 2usize..6, shift in 1usize..5) {
        let dim = 4;
        let qkv = tensor(vec![1, l, 3 * dim], seed);
        let perm: Vec<usize> = (0..l).map(|i| (i + shift) % l).collect();
        let mut permuted = qkv.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * 3 * dim..][..3 * dim].copy_from_slice(&qkv.data()[src * 3 * dim..][..3 * dim]);
        }
        let (out, _) = attention::attention_forward(&qkv, 2).unwrap();
        let (pout, _) = attention::attention_forward(&permuted, 2).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..dim {
                prop_assert!((pout.data()[dst * dim + j] - out.data()[src * dim + j]).abs() < 1e-12);
            }
        }
    }
}
