use amix_core::autodiff::{Graph, Tensor};
use amix_core::datasets::{apply_slice_removal, rotate_image, Dataset, PairLoader, SplitSpec};
use amix_core::regularizers::{
    anchored_mixup_penalty, kernel_weight, mix_with, norm_penalty, proportional_distance, GuardMode, Method,
    MixupConfig, NormKind, Reduction,
};
use amix_core::trainer::l1_loss;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nonzero(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    (lo..hi, any::<bool>()).prop_map(|(v, neg)| if neg { -v } else { v })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kernel_is_bounded_and_one_only_on_ties(a in -100.0..100.0f64, b in -100.0..100.0f64, beta in 0.05..20.0f64) {
        let w = kernel_weight(&[a], &[b], beta).unwrap()[0];
        prop_assert!(w <= 1.0);
        prop_assert!(w >= 0.0);
        if a == b {
            prop_assert_eq!(w, 1.0);
        } else if (a - b).abs() / (beta * beta) < 700.0 {
            prop_assert!(w > 0.0 && w < 1.0);
        }
    }

    #[test]
    fn kernel_decreases_with_distance(d1 in 0.0..30.0f64, extra in 1e-3..30.0f64, beta in 0.5..20.0f64) {
        let w = kernel_weight(&[0.0, 0.0], &[d1, d1 + extra], beta).unwrap();
        prop_assert!(w[1] < w[0]);
    }

    #[test]
    fn narrower_kernel_never_weighs_more(dy in 0.0..50.0f64, beta in 0.1..20.0f64, shrink in 0.05..1.0f64) {
        let wide = kernel_weight(&[dy], &[0.0], beta).unwrap()[0];
        let narrow = kernel_weight(&[dy], &[0.0], beta * shrink).unwrap()[0];
        prop_assert!(narrow <= wide);
    }

    #[test]
    fn distance_is_linear_in_lambda(
        yi in nonzero(0.1, 10.0), yj in nonzero(0.1, 10.0),
        zs in prop::collection::vec((nonzero(0.1, 3.0), nonzero(0.1, 3.0)), 1..8),
        a in 1e-6..1.0f64,
    ) {
        let (zi, zj): (Vec<f64>, Vec<f64>) = zs.into_iter().unzip();
        let d1 = proportional_distance(yi, yj, &zi, &zj, a).unwrap();
        let d2 = proportional_distance(yi, yj, &zi, &zj, 2.0 * a).unwrap();
        prop_assert!((d2 - 2.0 * d1).abs() <= 1e-12 * d2.abs().max(1.0));
    }

    #[test]
    fn proportional_features_give_zero_distance(
        yi in 0.5..10.0f64, yj in 0.5..10.0f64,
        zj in prop::collection::vec(0.1..3.0f64, 1..8),
    ) {
        let zi: Vec<f64> = zj.iter().map(|z| yi / yj * z).collect();
        let d = proportional_distance(yi, yj, &zi, &zj, 1.0).unwrap();
        prop_assert!(d.abs() < 1e-9);
        let off: Vec<f64> = zi.iter().map(|z| 1.5 * z).collect();
        prop_assert!(proportional_distance(yi, yj, &off, &zj, 1.0).unwrap().abs() > 0.0);
    }

    #[test]
    fn penalty_counts_and_sign(
        rows in prop::collection::vec((0.0..5.0f64, 0.0..5.0f64, prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), 3)), 1..10),
        zero_mask in prop::collection::vec(any::<bool>(), 10),
        lambda in 0.0..1.0f64,
        batch_guard in any::<bool>(),
        listing in any::<bool>(),
    ) {
        let n = rows.len();
        let mut yi = Vec::new();
        let mut yj = Vec::new();
        let mut zi = Vec::new();
        let mut zj = Vec::new();
        for (r, (a, b, zs)) in rows.iter().enumerate() {
            yi.push(*a);
            yj.push(if zero_mask[r] { 0.0 } else { *b + 0.1 });
            for (p, q) in zs {
                zi.push(*p);
                zj.push(*q);
            }
        }
        let cfg = MixupConfig {
            method: Method::AnchoredRegressionMixup,
            lambda,
            guard: if batch_guard { GuardMode::Batch } else { GuardMode::PerPair },
            reduction: if listing { Reduction::Listing } else { Reduction::PerPair },
            ..MixupConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let vi = g.param(Tensor::new(vec![n, 3], zi).unwrap());
        let vj = g.param(Tensor::new(vec![n, 3], zj).unwrap());
        let r = anchored_mixup_penalty(&mut g, &yi, &yj, vi, vj, &cfg).unwrap();
        let p = g.value(r.penalty).item().unwrap();
        prop_assert_eq!(r.applied + r.skipped, n);
        prop_assert!(p >= 0.0 && p.is_finite());
        let zero_rows = zero_mask[..n].iter().filter(|&&z| z).count();
        if batch_guard && zero_rows > 0 {
            prop_assert_eq!(r.skipped, n);
        } else if !batch_guard {
            prop_assert_eq!(r.skipped, zero_rows);
        }
        g.backward(r.penalty).unwrap();
        for v in [vi, vj] {
            if let Some(grad) = g.grad(v) {
                prop_assert!(grad.data().iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn mixing_is_convex(
        pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, 0.0..=1.0f64), 1..16),
    ) {
        let n = pairs.len();
        let xi = Tensor::new(vec![n, 1], pairs.iter().map(|p| p.0).collect()).unwrap();
        let xj = Tensor::new(vec![n, 1], pairs.iter().map(|p| p.1).collect()).unwrap();
        let yi: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let yj: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let lams: Vec<f64> = pairs.iter().map(|p| p.2).collect();
        let (x, y) = mix_with(&xi, &yi, &xj, &yj, &lams).unwrap();
        for k in 0..n {
            let (lo, hi) = (pairs[k].0.min(pairs[k].1), pairs[k].0.max(pairs[k].1));
            prop_assert!(x.data()[k] >= lo - 1e-12 && x.data()[k] <= hi + 1e-12);
            prop_assert!(y[k] >= lo - 1e-12 && y[k] <= hi + 1e-12);
        }
    }

    #[test]
    fn norm_penalty_matches_naive_sum(
        a in prop::collection::vec(-3.0..3.0f64, 1..12),
        b in prop::collection::vec(-3.0..3.0f64, 1..12),
        lambda in 0.0..2.0f64,
    ) {
        let mut g = Graph::<f64>::new();
        let pa = g.param(Tensor::new(vec![a.len()], a.clone()).unwrap());
        let pb = g.param(Tensor::new(vec![b.len()], b.clone()).unwrap());
        let ridge = norm_penalty(&mut g, &[pa, pb], NormKind::Ridge, lambda).unwrap();
        let lasso = norm_penalty(&mut g, &[pa, pb], NormKind::Lasso, lambda).unwrap();
        let mut sq = 0.0;
        let mut ab = 0.0;
        for v in a.iter().chain(&b) {
            sq += v * v;
            ab += v.abs();
        }
        prop_assert!((g.value(ridge).item().unwrap() - lambda * sq).abs() < 1e-10);
        prop_assert!((g.value(lasso).item().unwrap() - lambda * ab).abs() < 1e-10);
    }

    #[test]
    fn l1_loss_matches_naive_loop(pairs in prop::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 1..64)) {
        let n = pairs.len();
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::new(vec![n, 1], pairs.iter().map(|p| p.0).collect()).unwrap());
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let l = l1_loss(&mut g, pred, &y).unwrap();
        let mut naive = 0.0;
        for (p, t) in &pairs {
            naive += (p - t).abs();
        }
        naive /= n as f64;
        prop_assert!((g.value(l).item().unwrap() - naive).abs() < 1e-12);
    }

    #[test]
    fn slice_removal_partitions_targets(
        unique in 2usize..300, keep in 1usize..40, slice in 1usize..40, per in 1usize..4,
    ) {
        prop_assume!(keep + slice <= unique);
        let targets: Vec<f32> = (0..unique * per).map(|i| (i % unique) as f32 * 0.5).collect();
        let ds = Dataset::new(vec![1], vec![0.0; unique * per], targets).unwrap();
        let split = apply_slice_removal(&ds, SplitSpec { slice_width: slice, keep_width: keep }).unwrap();
        let mut all: Vec<f32> = split.kept_targets.iter().chain(&split.removed_targets).copied().collect();
        all.sort_by(f32::total_cmp);
        prop_assert_eq!(all, ds.unique_targets());
        for t in &split.kept_targets {
            prop_assert!(split.removed_targets.binary_search_by(|r| r.total_cmp(t)).is_err());
        }
        prop_assert_eq!(split.train.len() + split.removed.len(), ds.len());
        prop_assert_eq!(split.train.len(), split.kept_targets.len() * per);
        let run_total: usize = split.runs.iter().map(|r| r.count).sum();
        prop_assert_eq!(run_total, unique);
        prop_assert!(split.runs[0].kept);
        if keep == slice {
            let periods = unique / (keep + slice);
            let tail = unique % (keep + slice);
            let removed = periods * slice + tail.saturating_sub(keep);
            prop_assert_eq!(split.removed_targets.len(), removed);
        }
    }

    #[test]
    fn loader_streams_are_permutations(len in 1usize..200, batch in 1usize..32, seed in any::<u64>()) {
        prop_assume!(batch <= len);
        let loader = PairLoader::new(len, batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = loader.epoch(&mut rng);
        prop_assert_eq!(batches.len(), len / batch);
        for stream in [0, 1] {
            let mut seen = vec![false; len];
            for b in &batches {
                let idx = if stream == 0 { &b.i } else { &b.j };
                prop_assert_eq!(idx.len(), batch);
                for &k in idx {
                    prop_assert!(!seen[k]);
                    seen[k] = true;
                }
            }
        }
    }

    #[test]
    fn rotation_preserves_central_mass(angle in 0.0..180.0f64, seed in any::<u64>()) {
        // mass confined to the inscribed disk stays in frame under rotation
        use rand::Rng;
        let size = 28;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = (size as f64 - 1.0) / 2.0;
        let img: Vec<f32> = (0..size * size)
            .map(|k| {
                let (r, col) = ((k / size) as f64, (k % size) as f64);
                if ((r - c).powi(2) + (col - c).powi(2)).sqrt() < 9.0 { rng.gen::<f32>() } else { 0.0 }
            })
            .collect();
        let before: f64 = img.iter().map(|&v| v as f64).sum();
        let after: f64 = rotate_image(&img, size, angle).iter().map(|&v| v as f64).sum();
        prop_assert!((after - before).abs() <= 0.02 * before);
    }
}
