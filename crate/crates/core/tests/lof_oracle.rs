mod common;

use common::{random_points, rel_err, to_rows, BruteLof};
use ndarray::{Array1, Array2};
use open_intent::detector::{decide_lof_score, lof_fit, DetectionConfig, Label};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let n = rng.random_range(30..120);
        let d = rng.random_range(2..10);
        let k = rng.random_range(2..20);
        let reference = random_points(&mut rng, n, d);
        let queries = random_points(&mut rng, 10, d);
        let model = lof_fit(&reference, k).unwrap();
        let oracle = BruteLof::fit(to_rows(&reference), k);
        for i in 0..n {
            assert!(rel_err(model.kdist[i], oracle.kdist[i]) <= 1e-9);
            assert!(rel_err(model.lrd[i], oracle.lrd[i]) <= 1e-9);
            assert!(rel_err(model.reference_lof[i], oracle.lof[i]) <= 1e-9);
        }
        let got = model.score_rows(&queries).unwrap();
        for (g, q) in got.iter().zip(queries.rows()) {
            assert!(rel_err(*g, oracle.score(q.as_slice().unwrap())) <= 1e-9);
        }
    }
}

#[test]
fn fifty_point_reference_ten_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let reference = Array2::from_shape_fn((50, 3), |_| rng.random_range(-1.0..1.0));
    let queries = Array2::from_shape_fn((10, 3), |_| rng.random_range(-2.0..2.0));
    let model = lof_fit(&reference, 5).unwrap();
    let oracle = BruteLof::fit(to_rows(&reference), 5);
    for (g, q) in model.score_rows(&queries).unwrap().iter().zip(queries.rows()) {
        assert!(rel_err(*g, oracle.score(q.as_slice().unwrap())) <= 1e-9);
    }
}

#[test]
fn ties_enlarge_the_neighbourhood() {
    // the centre of a plus shape has four neighbours at distance 1 with k = 2
    let pts = ndarray::array![[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [5.0, 5.0]];
    let model = lof_fit(&pts, 2).unwrap();
    let oracle = BruteLof::fit(to_rows(&pts), 2);
    assert_eq!(model.kdist[0], 1.0);
    for i in 0..pts.nrows() {
        assert!(rel_err(model.lrd[i], oracle.lrd[i]) <= 1e-12);
    }
    // four reach distances of 1 each
    let expected_lrd = 4.0 / (4.0 * f64::max(1.0, oracle.kdist[1]));
    assert!(rel_err(model.lrd[0], expected_lrd) < 1e-12);
}

fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    // Gram-Schmidt on a random matrix
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut v: Array1<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for j in 0..i {
            let qj = q.row(j).to_owned();
            let p = v.dot(&qj);
            v = v - qj * p;
        }
        let norm = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / norm));
    }
    q
}

#[test]
fn rigid_transforms_leave_scores_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let d = rng.random_range(2..8);
        let reference = random_points(&mut rng, 80, d);
        let queries = random_points(&mut rng, 15, d);
        let rot = rotation(&mut rng, d);
        let shift: Array1<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let move_rows = |a: &Array2<f64>| a.dot(&rot.t()) + &shift;
        let k = 7;
        let base = lof_fit(&reference, k).unwrap();
        let moved = lof_fit(&move_rows(&reference), k).unwrap();
        for (a, b) in base.reference_lof.iter().zip(&moved.reference_lof) {
            assert!(rel_err(*a, *b) <= 1e-9, "{a} vs {b}");
        }
        let qa = base.score_rows(&queries).unwrap();
        let qb = moved.score_rows(&move_rows(&queries)).unwrap();
        for (a, b) in qa.iter().zip(&qb) {
            assert!(rel_err(*a, *b) <= 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn uniform_hypercube_has_few_outliers() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pts = Array2::from_shape_fn((1000, 4), |_| rng.random_range(0.0..1.0));
    let model = lof_fit(&pts, 20).unwrap();
    let flagged = model.reference_lof.iter().filter(|&&l| l > 1.5).count();
    assert!((flagged as f64) < 0.05 * 1000.0, "{flagged} of 1000 flagged");
}

#[test]
fn duplicated_reference_stays_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let base = Array2::from_shape_fn((20, 3), |_| rng.random_range(0.0..1.0));
    let doubled = ndarray::concatenate(ndarray::Axis(0), &[base.view(), base.view()]).unwrap();
    let model = lof_fit(&doubled, 1).unwrap();
    assert!(model.lrd.iter().all(|l| l.is_finite() && *l > 0.0));
    // a query on top of a duplicated pair sees the same density as the pair
    let s = model.score(base.row(0)).unwrap();
    assert!((s - 1.0).abs() < 1e-9, "{s}");
}

proptest! {
    #[test]
    fn raising_threshold_never_adds_rejections(
        lof in 0.0f64..5.0,
        t1 in 0.1f64..5.0,
        dt in 0.0f64..5.0,
        scores in proptest::collection::vec(-10.0f64..10.0, 1..6),
    ) {
        let low = decide_lof_score(lof, &scores, t1);
        let high = decide_lof_score(lof, &scores, t1 + dt);
        if let Label::Known(_) = low.predicted {
            prop_assert_eq!(high.predicted, low.predicted);
        }
    }

    #[test]
    fn small_random_instances_match_oracle(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(8..30);
        let k = rng.random_range(1..n.min(8));
        let pts = Array2::from_shape_fn((n, 2), |_| (rng.random_range(0..6) as f64) * 0.5);
        // coarse lattice values produce many exact ties and duplicates
        match lof_fit(&pts, k) {
            Ok(model) => {
                let oracle = BruteLof::fit(to_rows(&pts), k);
                for i in 0..n {
                    prop_assert!(rel_err(model.lrd[i], oracle.lrd[i]) <= 1e-9);
                    prop_assert!(rel_err(model.reference_lof[i], oracle.lof[i]) <= 1e-9);
                }
            }
            Err(_) => {
                let first = pts.row(0);
                prop_assert!(pts.rows().into_iter().all(|r| r == first));
            }
        }
    }
}

#[test]
fn default_config_assumptions() {
    let cfg = DetectionConfig::default();
    assert_eq!((cfg.lof_k, cfg.lof_threshold, cfg.msp_threshold, cfg.doc_risk_factor), (20, 1.5, 0.5, 3.0));
}
