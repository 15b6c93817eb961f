use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use efcm_core::data::augment::{augment, op_is_allowed, AugmentSpec};
use efcm_core::data::{extract_patches, synth_patches, Mask, PatchCoord, PatchSynthConfig, RgbImage};
use efcm_core::distill::distill_loss_value;
use efcm_core::metrics::{auc_binary, compute_metrics, MetricsRecord};
use efcm_core::mil::{ib_select, AttentionMILHead, Bag, HeadConfig, Strategy, StrategyConfig};
use efcm_core::profiler::count_params;
use efcm_core::scan::{ScanBlock, ScanConfig};
use efcm_core::students::{ModelSpec, Student};
use efcm_core::transformer::{TransScanBlock, TransScanConfig};
use efcm_tensor::nn::Mode;
use efcm_tensor::{Graph, Init, ParamStore, Tensor, WarmupCosine};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn scan(seed: u64, channels: usize, groups: usize, reduced: usize) -> (ParamStore<f64>, ScanBlock) {
    let mut store = ParamStore::new();
    let cfg = ScanConfig {
        channels,
        groups,
        reduced,
    };
    let block = ScanBlock::new(&mut store, &mut Init::new(seed), "scan", cfg).unwrap();
    (store, block)
}

fn selection(store: &ParamStore<f64>, block: &ScanBlock, x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::inference();
    let x = g.constant(x.clone());
    let (ut, uh) = block.branch_transforms(&mut g, store, x).unwrap();
    let sel = block.channel_select(&mut g, store, ut, uh, Mode::Eval).unwrap();
    (g.value(sel.a).data().to_vec(), g.value(sel.b).data().to_vec())
}

fn mil_head(d: usize, seed: u64) -> AttentionMILHead<f64> {
    AttentionMILHead::new(
        HeadConfig {
            in_dim: d,
            hidden: 5,
            num_classes: 2,
        },
        seed,
    )
    .unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn selection_weights_sum_to_one_and_ignore_common_logit_shifts(
        seed in any::<u64>(),
        groups in prop::sample::select(vec![1usize, 2, 4]),
        n in 1usize..3,
        hw in 3usize..6,
        shift in -5.0f64..5.0,
    ) {
        let (mut store, block) = scan(seed, 8, groups, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, 8, hw, hw], &mut rng);
        let (a, b) = selection(&store, &block, &x);
        for (ai, bi) in a.iter().zip(&b) {
            prop_assert!((ai + bi - 1.0).abs() <= 1e-6);
        }
        // the same vector w added to the A and B logits
        let w: Vec<f64> = (0..8).map(|_| shift * rng.random_range(-1.0..1.0)).collect();
        let mut named: BTreeMap<String, Tensor<f64>> = store.named_arrays().into_iter().collect();
        for key in ["scan.A.bias", "scan.B.bias"] {
            let t = named.get_mut(key).unwrap();
            let shifted: Vec<f64> = t.data().iter().zip(&w).map(|(v, s)| v + s).collect();
            *t = Tensor::from_vec([8], shifted).unwrap();
        }
        store.load_named(&named).unwrap();
        let (a2, b2) = selection(&store, &block, &x);
        prop_assert!(close(&a, &a2, 1e-6) && close(&b, &b2, 1e-6));
    }

    #[test]
    fn scan_and_transscan_preserve_shape(seed in any::<u64>(), h in 3usize..7, w in 3usize..7, n in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, block) = scan(seed, 8, 2, 4);
        let x = random(&[n, 8, h, w], &mut rng);
        let mut g = Graph::inference();
        let xn = g.constant(x.clone());
        let y = block.forward(&mut g, &store, xn, Mode::Eval).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());

        let mut store = ParamStore::new();
        let cfg = TransScanConfig {
            heads: 2,
            scan: ScanConfig { channels: 8, groups: 2, reduced: 4 },
            ..TransScanConfig::new(8, 1)
        };
        let tb = TransScanBlock::new(&mut store, &mut Init::new(seed), "ts", &cfg).unwrap();
        let mut g = Graph::inference();
        let xn = g.constant(x.clone());
        let y = tb.forward(&mut g, &store, xn, Mode::Eval).unwrap();
        prop_assert_eq!(g.shape(y), x.shape());
    }

    #[test]
    fn distill_loss_ignores_common_shifts(
        ft in prop::collection::vec(-3.0f64..3.0, 2..16),
        noise in prop::collection::vec(-1.0f64..1.0, 16),
        shift in -10.0f64..10.0,
        tau in prop::sample::select(vec![0.5, 1.0, 2.0, 4.0]),
    ) {
        let fs: Vec<f64> = ft.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let base = distill_loss_value(&ft, &fs, tau).unwrap();
        let ft2: Vec<f64> = ft.iter().map(|v| v + shift).collect();
        let fs2: Vec<f64> = fs.iter().map(|v| v + shift).collect();
        let moved = distill_loss_value(&ft2, &fs2, tau).unwrap();
        prop_assert!((base - moved).abs() <= 1e-6, "{} vs {}", base, moved);
    }

    #[test]
    fn schedule_is_continuous_at_the_warmup_junction(base in 1e-6f64..1e-2, warmup in 1u64..500, extra in 2u64..5000) {
        let s = WarmupCosine::new(base, warmup, warmup + extra).unwrap();
        prop_assert!((s.lr(warmup) - base).abs() <= 1e-12);
        let next = s.lr(warmup + 1);
        let slope = base * (1.0 - (std::f64::consts::PI / extra as f64).cos()) / 2.0;
        prop_assert!(next <= base && base - next <= slope + 1e-12);
        prop_assert!(s.lr(warmup + extra).abs() <= 1e-12);
    }

    #[test]
    fn attention_is_a_distribution_over_the_bag(seed in any::<u64>(), n in 1usize..12, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = mil_head(d, seed);
        let p = head.pool(&random(&[n, d], &mut rng)).unwrap();
        let w = &p.weights;
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        if n > 1 {
            prop_assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn bag_embedding_ignores_instance_order(seed in any::<u64>(), n in 2usize..10, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = mil_head(d, seed);
        let x = random(&[n, d], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.rotate_left(1 + seed as usize % (n - 1));
        perm.swap(0, n - 1);
        let a = head.pool(&x).unwrap();
        let b = head.pool(&x.select_first(&perm).unwrap()).unwrap();
        prop_assert!(close(&a.embedding, &b.embedding, 1e-6));
        prop_assert!(close(&a.logits, &b.logits, 1e-6));
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((a.weights[i] - b.weights[j]).abs() <= 1e-9);
        }
    }

    #[test]
    fn duplicating_a_bag_halves_every_weight(seed in any::<u64>(), n in 1usize..8, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = mil_head(d, seed);
        let x = random(&[n, d], &mut rng);
        let idx: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
        let a = head.pool(&x).unwrap();
        let b = head.pool(&x.select_first(&idx).unwrap()).unwrap();
        for (j, &i) in idx.iter().enumerate() {
            prop_assert!((b.weights[j] - a.weights[i] / 2.0).abs() <= 1e-9);
        }
        prop_assert!(close(&a.embedding, &b.embedding, 1e-9));
    }

    #[test]
    fn auc_matches_pair_counting(
        scores in prop::collection::vec(prop::sample::select(vec![0.0f64, 0.25, 0.5, 0.75, 1.0]), 2..=12),
        flips in prop::collection::vec(any::<bool>(), 12),
    ) {
        let pos: Vec<bool> = flips[..scores.len()].to_vec();
        let (np, nn) = (pos.iter().filter(|&&p| p).count(), pos.iter().filter(|&&p| !p).count());
        let auc = auc_binary(&scores, &pos);
        if np == 0 || nn == 0 {
            prop_assert!(auc.is_err());
        } else {
            let mut s = 0.0;
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if pos[i] && !pos[j] {
                        s += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            let oracle = s / (np * nn) as f64;
            prop_assert!((auc.unwrap() - oracle).abs() <= 1e-12);
            let rows: Vec<Vec<f64>> = scores.iter().map(|&p| vec![1.0 - p, p]).collect();
            let labels: Vec<usize> = pos.iter().map(|&p| p as usize).collect();
            let m = compute_metrics(&rows, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&m.acc) && (0.0..=1.0).contains(&m.auc));
        }
    }

    #[test]
    fn patch_grid_tiles_without_overlap(seed in any::<u64>(), w in 4usize..40, h in 4usize..40, size in 1usize..8, density in 0.0f64..1.0) {
        prop_assume!(size <= w && size <= h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = Mask { width: w, height: h, data: (0..w * h).map(|_| rng.random_bool(density)).collect() };
        let coords = extract_patches(&mask, size).unwrap();
        let mut covered = BTreeSet::new();
        for c in &coords {
            prop_assert!(c.x + c.size <= w && c.y + c.size <= h && c.size == size);
            prop_assert!(c.x % size == 0 && c.y % size == 0 && c.coverage >= 0.5);
            for y in c.y..c.y + size {
                for x in c.x..c.x + size {
                    prop_assert!(covered.insert((x, y)));
                }
            }
        }
    }

    #[test]
    fn augmentation_draws_only_allowed_parameters(seed in any::<u64>()) {
        let img = RgbImage::filled(6, 6, [0.4, 0.5, 0.6]);
        let out = augment(&img, &AugmentSpec::default(), seed).unwrap();
        prop_assert!(out.ops.iter().all(op_is_allowed), "{:?}", out.ops);
        prop_assert!(out.image.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn every_sub_path_receives_gradient() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = TransScanConfig {
            heads: 2,
            scan: ScanConfig {
                channels: 8,
                groups: 2,
                reduced: 4,
            },
            ..TransScanConfig::new(8, 1)
        };
        let tb = TransScanBlock::new(&mut store, &mut Init::new(seed), "ts", &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&[2, 8, 4, 4], &mut rng));
        let y = tb.forward(&mut g, &store, x, Mode::Train).unwrap();
        let w = g.constant(random(g.shape(y), &mut rng));
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        // bucket by layer (name without the final weight/bias component)
        let mut norms: BTreeMap<String, f64> = BTreeMap::new();
        for id in store.ids() {
            let name = &store.param(id).name;
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l).to_string();
            let n = grads.param(&store, id).map_or(0.0, |t| t.data().iter().map(|v| v * v).sum::<f64>());
            *norms.entry(layer).or_insert(0.0) += n;
        }
        assert!(norms.len() >= 10, "{norms:?}");
        for (layer, n) in &norms {
            assert!(*n > 0.0, "seed {seed}: no gradient reaches {layer}");
        }
    }
}

#[test]
fn instance_selection_is_a_function_of_its_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 30;
    let feats = Tensor::<f32>::from_fn([n, 6], |_| rng.random_range(-1.0..1.0));
    let bag = Bag {
        slide_id: "s".into(),
        label: 1,
        split: "train".into(),
        width: 30 * 8,
        height: 8,
        coords: (0..n)
            .map(|i| PatchCoord {
                x: 8 * i,
                y: 0,
                size: 8,
                coverage: 1.0,
            })
            .collect(),
        instance_ids: (0..n).map(|i| format!("p{i}")).collect(),
        tumor: vec![false; n],
        images: None,
        features: Some(feats),
    };
    let scorer = AttentionMILHead::<f32>::new(
        HeadConfig {
            in_dim: 6,
            hidden: 4,
            num_classes: 2,
        },
        9,
    )
    .unwrap();
    let a = ib_select(&bag, 7, &scorer).unwrap();
    assert_eq!(a, ib_select(&bag, 7, &scorer).unwrap());
    assert_eq!(a.len(), 7);
    let w = scorer.pool(bag.features().unwrap()).unwrap().weights;
    let floor = a.iter().map(|&i| w[i]).fold(f32::INFINITY, f32::min);
    let above = (0..n).filter(|i| !a.contains(i) && w[*i] > floor).count();
    assert_eq!(above, 0);
}

#[test]
fn synthesis_is_byte_deterministic() {
    let cfg = PatchSynthConfig {
        samples_per_class: 6,
        ..Default::default()
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        synth_patches(&cfg, 42).unwrap().write(d.path()).unwrap();
    }
    let files = |p: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        walk(p).into_iter().map(|f| (f.strip_prefix(p).unwrap().display().to_string(), std::fs::read(&f).unwrap())).collect()
    };
    let a = files(dirs[0].path());
    assert!(a.len() > 12);
    assert_eq!(a, files(dirs[1].path()));
    let other = tempfile::tempdir().unwrap();
    synth_patches(&cfg, 43).unwrap().write(other.path()).unwrap();
    assert_ne!(a, files(other.path()));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = vec![];
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn static_costs_do_not_depend_on_weights() {
    let spec = ModelSpec::desk_fpd();
    let counted = count_params(&spec).unwrap();
    for seed in [0, 1, 99] {
        assert_eq!(Student::<f32>::new(spec, seed).unwrap().num_params() as u64, counted);
    }
}

#[test]
fn result_types_round_trip() {
    let m = MetricsRecord {
        split: "val".into(),
        acc: 0.8125,
        auc: 0.9,
        class_counts: vec![3, 5],
        epoch: Some(4),
        checkpoint: Some("best.json".into()),
    };
    assert_eq!(serde_json::from_str::<MetricsRecord>(&serde_json::to_string(&m).unwrap()).unwrap(), m);
    let ds = synth_patches(
        &PatchSynthConfig {
            samples_per_class: 3,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let text = serde_json::to_string(&ds.manifest).unwrap();
    assert_eq!(serde_json::from_str::<efcm_core::data::Manifest>(&text).unwrap(), ds.manifest);
    let s = StrategyConfig {
        strategy: Strategy::Retrain,
        k: 3,
        ..Default::default()
    };
    assert_eq!(serde_json::from_str::<StrategyConfig>(&serde_json::to_string(&s).unwrap()).unwrap(), s);
    let spec = AugmentSpec::default();
    assert_eq!(serde_json::from_str::<AugmentSpec>(&serde_json::to_string(&spec).unwrap()).unwrap(), spec);
}
