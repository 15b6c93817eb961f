//! Every differentiable primitive against central differences in f64, twenty
//! seeds each, on small random shapes.

use efcm_tensor::{grad_check_full, ConvGeometry, Graph, NodeId, ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so relu kinks are never straddled.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Distinct values spaced well apart, so max-pool winners are stable.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(shape.to_vec(), v).unwrap()
}

/// Loss `Σ y ⊙ w` with fixed random weights `w`.
fn weighted(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let rep = grad_check_full(|g, _, xs| f(g, xs), &inputs, &mut [], EPS).unwrap();
    assert!(rep.max_rel_error < TOL, "{name}: {rep:?}");
}

#[test]
fn elementwise_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [rng.random_range(1..4), rng.random_range(1..5)];
        let a = off_kink(&mut rng, &shape);
        let b = rand_tensor(&mut rng, &shape);
        check("add/sub/mul", vec![a.clone(), b.clone()], |g, x| {
            let s = g.add(x[0], x[1])?;
            let d = g.sub(s, x[1])?;
            let m = g.mul(d, x[1])?;
            let k = g.scale(m, -1.7)?;
            let c = g.add_scalar(k, 0.3)?;
            let o = g.one_minus(c)?;
            weighted(g, o, seed)
        });
        for kind in ["relu", "sigmoid", "tanh", "gelu"] {
            check(kind, vec![a.clone()], |g, x| {
                let y = match kind {
                    "relu" => g.relu(x[0])?,
                    "sigmoid" => g.sigmoid(x[0])?,
                    "tanh" => g.tanh(x[0])?,
                    _ => g.gelu(x[0])?,
                };
                weighted(g, y, seed)
            });
        }
    }
}

#[test]
fn broadcast_products() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, &[n, c, h, w]);
        let s = rand_tensor(&mut rng, &[n, c]);
        let m = rand_tensor(&mut rng, &[n, 1, h, w]);
        check("mul_channel/mul_spatial", vec![x, s, m], |g, x| {
            let a = g.mul_channel(x[0], x[1])?;
            let b = g.mul_spatial(a, x[2])?;
            weighted(g, b, seed)
        });
    }
}

#[test]
fn convolution_all_geometries() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = [1, 2][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..3);
        let cout = groups * rng.random_range(1..3);
        let k = rng.random_range(1..4);
        let geom = ConvGeometry::new(rng.random_range(1..3), rng.random_range(0..3), rng.random_range(1..3), groups);
        let h = geom.dilation * (k - 1) + 1 + rng.random_range(0..3);
        let x = rand_tensor(&mut rng, &[2, cin, h, h + 1]);
        let wt = rand_tensor(&mut rng, &[cout, cin / groups, k, k]);
        let b = rand_tensor(&mut rng, &[cout]);
        check("conv2d", vec![x, wt, b], |g, x| {
            let y = g.conv2d(x[0], x[1], Some(x[2]), geom)?;
            weighted(g, y, seed)
        });
    }
}

#[test]
fn pooling() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(3..7), rng.random_range(3..7)];
        let x = spaced(&mut rng, &shape);
        check("max_pool2d/global_avg_pool", vec![x], |g, x| {
            let p = g.max_pool2d(x[0], 3, 2, 1)?;
            let a = g.global_avg_pool(x[0])?;
            let lp = weighted(g, p, seed)?;
            let la = weighted(g, a, seed + 1)?;
            g.add(lp, la)
        });
    }
}

#[test]
fn normalization() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = (rng.random_range(2..4), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, &[n, c, 2, 3]);
        let gamma = rand_tensor(&mut rng, &[c]);
        let beta = rand_tensor(&mut rng, &[c]);
        check("batch_norm train", vec![x.clone(), gamma.clone(), beta.clone()], |g, x| {
            let y = g.batch_norm_train(x[0], x[1], x[2], 1e-5, None)?;
            weighted(g, y, seed)
        });
        let mean = rand_tensor(&mut rng, &[c]);
        let var = Tensor::from_fn([c], |_| rng.random_range(0.5..2.0));
        check("batch_norm eval", vec![x.clone(), gamma.clone(), beta.clone()], |g, x| {
            let y = g.batch_norm_eval(x[0], x[1], x[2], &mean, &var, 1e-5)?;
            weighted(g, y, seed)
        });
        // width 2 is degenerate (output ±γ for any input), so start at 3
        let t = rand_tensor(&mut rng, &[n, 3, c + 2]);
        let lg = rand_tensor(&mut rng, &[c + 2]);
        let lb = rand_tensor(&mut rng, &[c + 2]);
        check("layer_norm", vec![t, lg, lb], |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            weighted(g, y, seed)
        });
    }
}

#[test]
fn dense_layout_and_attention() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, &[2, m, k]);
        let w = rand_tensor(&mut rng, &[n, k]);
        let b = rand_tensor(&mut rng, &[n]);
        check("linear", vec![x, w, b], |g, x| {
            let y = g.linear(x[0], x[1], Some(x[2]))?;
            weighted(g, y, seed)
        });
        let a = rand_tensor(&mut rng, &[m, k]);
        let bm = rand_tensor(&mut rng, &[k, n]);
        check("matmul", vec![a, bm], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            let r = g.reshape(y, &[m * n])?;
            weighted(g, r, seed)
        });
        let (c, h, wd) = (rng.random_range(1..4), rng.random_range(1..3), rng.random_range(1..4));
        let img = rand_tensor(&mut rng, &[2, c, h, wd]);
        check("tokens", vec![img], |g, x| {
            let t = g.nchw_to_tokens(x[0])?;
            let t2 = g.tanh(t)?;
            let back = g.tokens_to_nchw(t2, h, wd)?;
            weighted(g, back, seed)
        });
        let heads = rng.random_range(1..3);
        let dim = heads * rng.random_range(1..4);
        let l = rng.random_range(1..5);
        let qkv = rand_tensor(&mut rng, &[2, l, 3 * dim]);
        check("attention", vec![qkv], |g, x| {
            let y = g.attention(x[0], heads)?;
            weighted(g, y, seed)
        });
        let s = rand_tensor(&mut rng, &[2, k]);
        check("softmax", vec![s], |g, x| {
            let y = g.softmax_last(x[0])?;
            weighted(g, y, seed)
        });
    }
}

#[test]
fn reductions_and_losses() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, d) = (rng.random_range(1..4), rng.random_range(2..6));
        let t = rand_tensor(&mut rng, &[r, d]);
        let s = rand_tensor(&mut rng, &[r, d]);
        let tau = rng.random_range(0.5..2.0);
        check("mse + kl", vec![t.clone(), s.clone()], |g, x| {
            let a = g.mse(x[0], x[1])?;
            let b = g.kl_softmax(x[0], x[1], tau)?;
            let m = g.mean(x[1])?;
            let ab = g.add(a, b)?;
            g.add(ab, m)
        });
        let mut targets = Tensor::zeros([r, d]);
        for row in 0..r {
            let cls = rng.random_range(0..d);
            for j in 0..d {
                targets.data_mut()[row * d + j] = if j == cls { 0.9 + 0.1 / d as f64 } else { 0.1 / d as f64 };
            }
        }
        check("cross_entropy", vec![s], |g, x| g.cross_entropy(x[0], &targets));
    }
}

#[test]
fn frozen_params_are_excluded_from_the_check_set() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::from_vec([2], vec![0.5, 0.25]).unwrap(), false);
    let rep = grad_check_full(
        |g, st, xs| {
            let wn = g.param(&st[0], w);
            let p = g.mul(xs[0], wn)?;
            g.sum(p)
        },
        &[Tensor::from_vec([2], vec![1.0, 2.0]).unwrap()],
        &mut [store],
        EPS,
    )
    .unwrap();
    assert_eq!(rep.coordinates, 2);
}
