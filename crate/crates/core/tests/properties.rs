use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use stpatch::compact::rasterize;
use stpatch::crop::{extract_patch, sample_window_origin};
use stpatch::eval::{accuracy, adjusted_rand_index, knn_classify, reconstruction_score};
use stpatch::genesel::{hvg_topk, weighted_gene_sample};
use stpatch::ingest::{generate_synthetic_slice, SyntheticConfig};
use stpatch::losses::{self, MaskedTargets};
use stpatch::matrix::Matrix;
use stpatch::pipeline::{build_dataset, build_spot_dataset, BuildConfig, BuildParams, SliceSource};
use stpatch::render;
use stpatch::rng::{derive, from_seed};
use stpatch::shard::MANIFEST_FILE;
use stpatch::stats::dataset_stats;

fn synthetic(id: &str, h: usize, w: usize, k: usize, hole_rate: f64, seed: u64) -> SliceSource {
    let mut config = SyntheticConfig::new(h, w, k, 4, seed);
    config.hole_rate = hole_rate;
    SliceSource::Synthetic { id: id.into(), count: None, config }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weighted_sampling_ignores_power_of_two_scale(
        var in proptest::collection::vec(0.0f64..50.0, 1..40),
        frac in 0.0f64..=1.0,
        shift in -20i32..20,
        seed in any::<u64>(),
    ) {
        let m = (frac * var.len() as f64) as usize;
        let c = 2f64.powi(shift);
        let scaled: Vec<f64> = var.iter().map(|v| v * c).collect();
        let a = weighted_gene_sample(&var, m, 1e-8, &mut from_seed(seed)).unwrap();
        let b = weighted_gene_sample(&scaled, m, 1e-8 * c, &mut from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hvg_ignores_positive_scale(var in proptest::collection::vec(0.0f64..50.0, 1..40), frac in 0.0f64..=1.0, c in 0.01f64..100.0) {
        let m = (frac * var.len() as f64) as usize;
        let mut a = hvg_topk(&var, m).unwrap();
        let scaled: Vec<f64> = var.iter().map(|v| v * c).collect();
        let mut b = hvg_topk(&scaled, m).unwrap();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn windows_stay_inside_and_are_reproducible(
        gh in 1usize..30, gw in 1usize..30, fh in 0.0f64..=1.0, fw in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let slice = generate_synthetic_slice("w", &SyntheticConfig::new(gh, gw, 3, 1, seed)).unwrap().slice;
        let grid = rasterize(&slice, 3).unwrap();
        let h = 1 + (fh * (gh - 1) as f64) as usize;
        let w = 1 + (fw * (gw - 1) as f64) as usize;
        let draw = |n: usize| {
            let mut r = derive(seed, "w", "patch", 0);
            (0..n).map(|_| sample_window_origin(&grid, h, w, &mut r).unwrap()).collect::<Vec<_>>()
        };
        let origins = draw(20);
        prop_assert_eq!(&origins, &draw(20));
        for &(ox, oy) in &origins {
            prop_assert!(ox + w <= gw && oy + h <= gh);
            let a = extract_patch(&grid, (ox, oy), h, w).unwrap();
            let b = extract_patch(&grid, (ox, oy), h, w).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn generator_labels_match_spots(h in 1usize..20, w in 1usize..20, holes in 0.0f64..0.9, seed in any::<u64>()) {
        let mut cfg = SyntheticConfig::new(h, w, 8, 1, seed);
        cfg.hole_rate = holes;
        let s = generate_synthetic_slice("g", &cfg).unwrap();
        prop_assert_eq!(s.labels.len(), s.slice.len());
        prop_assert!(!s.slice.is_empty());
    }

    #[test]
    fn ari_symmetric_and_relabel_invariant(
        pairs in proptest::collection::vec((0usize..5, 0usize..4), 2..60),
        perm_seed in any::<u64>(),
    ) {
        let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let ab = adjusted_rand_index(&a, &b).unwrap();
        prop_assert_eq!(ab, adjusted_rand_index(&b, &a).unwrap());
        let mut names: Vec<usize> = (100..105).collect();
        names.shuffle(&mut from_seed(perm_seed));
        let renamed: Vec<usize> = a.iter().map(|&l| names[l]).collect();
        prop_assert_eq!(ab, adjusted_rand_index(&renamed, &b).unwrap());
        prop_assert!(ab <= 1.0);
    }

    #[test]
    fn accuracy_invariant_under_joint_permutation(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        seed in any::<u64>(),
    ) {
        let mut p = pairs.clone();
        p.shuffle(&mut from_seed(seed));
        let split = |v: &[(usize, usize)]| v.iter().copied().unzip::<usize, usize, Vec<_>, Vec<_>>();
        let (a, b) = split(&pairs);
        let (c, d) = split(&p);
        prop_assert_eq!(accuracy(&a, &b).unwrap(), accuracy(&c, &d).unwrap());
    }

    #[test]
    fn knn_invariant_under_signed_permutation_and_shift(
        d in 1usize..5, n_train in 3usize..40, n_test in 1usize..20, k in 1usize..8, seed in any::<u64>(),
    ) {
        let k = k.min(n_train);
        let mut r = from_seed(seed);
        let mut pts = |n: usize| (0..n).map(|_| (0..d).map(|_| r.gen_range(-3i32..4) as f64).collect::<Vec<f64>>()).collect::<Vec<_>>();
        let (train, test) = (pts(n_train), pts(n_test));
        let labels: Vec<usize> = (0..n_train).map(|_| r.gen_range(0..3)).collect();
        let mut axes: Vec<usize> = (0..d).collect();
        axes.shuffle(&mut r);
        let signs: Vec<f64> = (0..d).map(|_| if r.gen() { 1.0 } else { -1.0 }).collect();
        let shift: Vec<f64> = (0..d).map(|_| r.gen_range(-50i32..50) as f64).collect();
        let map = |p: &Vec<f64>| (0..d).map(|i| signs[i] * p[axes[i]] + shift[i]).collect::<Vec<f64>>();
        let m = |v: &[Vec<f64>]| Matrix::from_rows(v).unwrap();
        let before = knn_classify(&m(&train), &labels, &m(&test), k).unwrap();
        let tt: Vec<Vec<f64>> = train.iter().map(map).collect();
        let ts: Vec<Vec<f64>> = test.iter().map(map).collect();
        prop_assert_eq!(before, knn_classify(&m(&tt), &labels, &m(&ts), k).unwrap());
    }

    #[test]
    fn knn_invariant_under_random_rotation(d in 2usize..5, n_train in 5usize..30, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n_train);
        let mut r = from_seed(seed);
        let train: Vec<Vec<f64>> = (0..n_train).map(|_| (0..d).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let test: Vec<Vec<f64>> = (0..10).map(|_| (0..d).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let labels: Vec<usize> = (0..n_train).map(|_| r.gen_range(0..3)).collect();
        // skip instances whose neighbor sets hinge on near-equal distances
        for q in &test {
            let mut dist: Vec<f64> = train.iter().map(|t| t.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
            dist.sort_by(f64::total_cmp);
            prop_assume!(dist.windows(2).all(|w| w[1] - w[0] > 1e-6));
        }
        // Householder reflection I - 2 v v^T / |v|^2
        let v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        prop_assume!(vv > 1e-3);
        let reflect = |p: &Vec<f64>| {
            let dot: f64 = p.iter().zip(&v).map(|(a, b)| a * b).sum();
            p.iter().zip(&v).map(|(a, b)| a - 2.0 * dot / vv * b).collect::<Vec<f64>>()
        };
        let m = |v: &[Vec<f64>]| Matrix::from_rows(v).unwrap();
        let before = knn_classify(&m(&train), &labels, &m(&test), k).unwrap();
        let tt: Vec<Vec<f64>> = train.iter().map(reflect).collect();
        let ts: Vec<Vec<f64>> = test.iter().map(reflect).collect();
        prop_assert_eq!(before, knn_classify(&m(&tt), &labels, &m(&ts), k).unwrap());
    }

    #[test]
    fn reconstruction_zero_iff_equal(t in proptest::collection::vec(-5.0f64..5.0, 1..30), i in any::<prop::sample::Index>(), delta in 0.01f64..3.0) {
        let (mse, mae) = reconstruction_score(&t, &t).unwrap();
        prop_assert!(mse == 0.0 && mae == 0.0);
        let mut p = t.clone();
        p[i.index(t.len())] += delta;
        let (mse, mae) = reconstruction_score(&t, &p).unwrap();
        prop_assert!(mse > 0.0 && mae > 0.0);
    }

    #[test]
    fn spot_loss_nonnegative_and_zero_iff_exact(
        rows in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 1..6), 1..8),
        which in any::<prop::sample::Index>(),
        delta in 0.001f64..2.0,
    ) {
        prop_assert_eq!(losses::loss_spot(&rows, &rows).unwrap(), 0.0);
        let mut p = rows.clone();
        let i = which.index(rows.len());
        p[i][0] += delta;
        let l = losses::loss_spot(&rows, &p).unwrap();
        prop_assert!(l > 0.0);
        let t = MaskedTargets::new(rows.iter().map(|r| (0..r.len()).collect()).collect(), rows.clone()).unwrap();
        prop_assert_eq!(t.total_masked(), rows.iter().map(Vec::len).sum::<usize>());
    }
}

#[test]
fn stats_occupancy_tracks_hole_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BuildConfig {
        output: dir.path().to_path_buf(),
        slices: vec![synthetic("a", 60, 60, 16, 0.25, 1), synthetic("b", 50, 70, 16, 0.25, 2)],
        params: BuildParams { h: 8, w: 8, m: 4, n_s: 200, ..BuildParams::default() },
    };
    build_dataset(&cfg, 1).unwrap();
    let s = dataset_stats(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(s.record_count, 400);
    assert_eq!(s.records_per_slice, vec![("a".to_string(), 200), ("b".to_string(), 200)]);
    // 400 windows of 64 sites; per-window sd of the rate is about 0.054
    assert!((s.mean_occupancy - 0.75).abs() < 0.02, "{}", s.mean_occupancy);
    assert_eq!(s.occupancy_histogram.iter().sum::<u64>(), 400);
    assert_eq!(s.channels.mean.len(), 4);
}

#[test]
fn emitted_records_sum_over_usable_slices() {
    let dir = tempfile::tempdir().unwrap();
    let slices = vec![
        synthetic("a", 20, 20, 12, 0.0, 1),
        synthetic("tiny", 6, 40, 12, 0.0, 2),
        synthetic("c", 30, 25, 12, 0.2, 3),
    ];
    let params = BuildParams { h: 8, w: 8, m: 5, n_s: 7, ..BuildParams::default() };
    let cfg = BuildConfig { output: dir.path().join("p"), slices: slices.clone(), params: params.clone() };
    let m = build_dataset(&cfg, 1).unwrap();
    assert_eq!(m.record_count, 14);
    assert_eq!(m.build.unwrap().skipped_slices, 1);

    let cfg = BuildConfig { output: dir.path().join("s"), slices, params };
    let m = build_spot_dataset(&cfg, 1).unwrap();
    let occupied: u64 = [400u64, 240, 750 - (0.2f64 * 750.0).round() as u64].iter().sum();
    assert_eq!(m.record_count, occupied);
}

#[test]
fn rendering_is_deterministic() {
    let s = generate_synthetic_slice("r", &SyntheticConfig::new(9, 13, 6, 2, 4)).unwrap();
    let grid = rasterize(&s.slice, 6).unwrap();
    let a = render::render_grid_channel(&grid, 2).unwrap();
    let b = render::render_grid_channel(&grid, 2).unwrap();
    assert_eq!(a, b);
    let header = b"P5\n13 9\n255\n";
    assert!(a.starts_with(header));
    assert_eq!(a.len(), header.len() + 9 * 13);
}
