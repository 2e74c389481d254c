mod common;

use common::{diversity_by_counting, integer_weights, sparsity_exhaustive};
use insightr_core::config::RunConfig;
use insightr_core::metrics::{
    diversity, evaluate, explain, pca_2d, pca_embed, rounded_grade, sparsity, top_k_indices, upsample_bilinear,
    usage_histogram, PointKind, DIVERSITY_THRESHOLD, TOP_SET,
};
use insightr_core::pipeline::{build_model, train};
use insightr_core::prototype::reciprocal_distance;
use insightr_core::synth::generate;
use insightr_core::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn sparsity_and_diversity_match_brute_force_on_1000_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let m = rng.random_range(1..13);
        let n = rng.random_range(1..120);
        let w = integer_weights(&mut rng, n, m);
        for row in &w {
            assert_eq!(sparsity(row).unwrap(), sparsity_exhaustive(row), "{row:?}");
        }
        let sets: Vec<Vec<usize>> = w.iter().map(|row| top_k_indices(row, TOP_SET)).collect();
        assert_eq!(diversity(&sets, m, DIVERSITY_THRESHOLD).unwrap(), diversity_by_counting(&sets, m));
    }
}

#[test]
fn uniform_weights_need_ceil_of_eighty_percent() {
    for m in 1..=40 {
        let expected = (0.8 * m as f64 - 1e-9).ceil() as usize;
        assert_eq!(sparsity(&vec![1.0; m]).unwrap(), expected.max(1), "m = {m}");
    }
    assert_eq!(sparsity(&[1.0; 10]).unwrap(), 8);
    assert_eq!(sparsity(&[1.0; 5]).unwrap(), 4);
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(matches!(sparsity(&[0.0, 0.0]), Err(Error::DegenerateHead(_))));
    assert!(sparsity(&[1.0, -1.0]).is_err());
    assert!(diversity(&[], 3, 0.01).is_err());
    assert!(diversity(&[vec![0, 0]], 3, 0.01).is_err());
    assert!(diversity(&[vec![3]], 3, 0.01).is_err());
}

#[test]
fn diversity_threshold_is_inclusive() {
    // 100 samples, prototype 1 appears in exactly one top set.
    let mut sets = vec![vec![0]; 99];
    sets.push(vec![1]);
    assert_eq!(diversity(&sets, 3, 0.01).unwrap(), 2);
    let hist = usage_histogram(&sets, 3).unwrap();
    assert_eq!(hist, vec![0.99, 0.01, 0.0]);
}

#[test]
fn accuracy_rounding_clamps() {
    assert_eq!(rounded_grade(-0.7, 4.0), 0.0);
    assert_eq!(rounded_grade(2.49, 4.0), 2.0);
    assert_eq!(rounded_grade(2.5, 4.0), 3.0);
    assert_eq!(rounded_grade(9.0, 4.0), 4.0);
}

#[test]
fn pca_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scales = [3.0, 1.5, 0.5, 0.1];
    let points: Vec<Vec<f64>> = (0..12)
        .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
        .collect();
    let pca = pca_2d(&points).unwrap();

    let mean: Vec<f64> = (0..4).map(|d| points.iter().map(|p| p[d]).sum::<f64>() / 12.0).collect();
    let x = DMatrix::from_fn(12, 4, |i, d| points[i][d] - mean[d]);
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    for (axis, &k) in order.iter().take(2).enumerate() {
        let v: Vec<f64> = (0..4).map(|d| vt[(k, d)]).collect();
        let dot: f64 = v.iter().zip(&pca.axes[axis]).map(|(a, b)| a * b).sum();
        let sign = dot.signum();
        for d in 0..4 {
            assert!((pca.axes[axis][d] - sign * v[d]).abs() < 1e-8);
        }
        let ratio = svd.singular_values[k].powi(2) / svd.singular_values.iter().map(|s| s * s).sum::<f64>();
        assert!((pca.explained[axis] - ratio).abs() < 1e-8);
        for i in 0..12 {
            let proj: f64 = (0..4).map(|d| x[(i, d)] * v[d]).sum();
            assert!((pca.coords[i][axis] - sign * proj).abs() < 1e-8);
        }
    }
    assert!(pca.explained[0] >= pca.explained[1]);
    let origin = pca.project(&mean);
    assert!(origin[0].abs() < 1e-12 && origin[1].abs() < 1e-12);
}

#[test]
fn pca_needs_two_directions_of_spread() {
    let line: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
    assert!(matches!(pca_2d(&line), Err(Error::DegenerateSpread(_))));
    let same = vec![vec![1.0, 1.0]; 4];
    assert!(pca_2d(&same).is_err());
}

#[test]
fn upsampling_preserves_constants_and_corners() {
    let out = upsample_bilinear(&[2.0; 4], 2, 2, 8, 8);
    assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-15));
    let ramp = upsample_bilinear(&[0.0, 1.0, 0.0, 1.0], 2, 2, 8, 8);
    assert_eq!(ramp[0], 0.0);
    assert_eq!(ramp[7], 1.0);
    assert!(ramp[..8].windows(2).all(|p| p[0] <= p[1]));
}

#[test]
fn explanations_are_consistent_with_the_forward_pass() {
    let cfg = RunConfig::tiny();
    let (train_set, test_set) = generate(&cfg.data).unwrap();

    let fresh = build_model(&cfg).unwrap();
    let e = explain(&fresh, &test_set, 0, 2).unwrap();
    assert!(e.warning.is_some());
    assert!(e.records.iter().all(|r| r.provenance.is_none()));

    let (model, _) = train(&cfg, &train_set, |_, _| Ok(())).unwrap();
    let eval = evaluate(&model, &test_set).unwrap();
    for i in 0..test_set.len() {
        let e = explain(&model, &test_set, i, 2).unwrap();
        assert!(e.warning.is_none());
        assert_eq!(e.top().len(), 2);
        assert!((e.records.iter().map(|r| r.fraction).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(e.records.windows(2).all(|p| p[0].weight >= p[1].weight));
        assert!((e.prediction - eval.samples[i].prediction).abs() < 1e-12);
        let (h, w) = e.latent_grid;
        for r in &e.records {
            assert_eq!(r.activation.len(), h * w);
            assert_eq!(r.upsampled.len(), e.input_grid.0 * e.input_grid.1);
            let peak = top_k_indices(&r.activation, 1)[0];
            assert_eq!((peak / w, peak % w), (r.patch_row, r.patch_col));
            let d = reciprocal_distance(r.similarity, model.eps, model.bank.d_max);
            let d_peak = reciprocal_distance(r.activation[peak], model.eps, model.bank.d_max);
            assert!((d - d_peak).abs() < 1e-9);
            assert!(r.provenance.is_some());
        }
    }
    assert!(explain(&model, &test_set, test_set.len(), 2).is_err());
}

#[test]
fn embedding_covers_prototypes_and_patches() {
    let cfg = RunConfig::tiny();
    let (train_set, test_set) = generate(&cfg.data).unwrap();
    let (model, _) = train(&cfg, &train_set, |_, _| Ok(())).unwrap();
    let report = pca_embed(&model, &test_set, 2).unwrap();
    let protos = report.points.iter().filter(|p| p.kind == PointKind::Prototype).count();
    assert_eq!(protos, 3);
    assert_eq!(report.points.len(), 3 + 2 * test_set.len());
    assert!((report.usage.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(report.explained_variance[0] >= report.explained_variance[1]);
    assert_eq!(report.to_csv().lines().count(), report.points.len() + 1);
}
