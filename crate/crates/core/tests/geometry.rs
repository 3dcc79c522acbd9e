use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symmcomp::geometry::oracle::{chamfer_l1_scan, chamfer_l2_scan, fidelity_scan, knn_scan};
use symmcomp::geometry::{
    chamfer_l1, chamfer_l2, f1_score, fidelity_distance, fps, householder, knn, mmd, reflect_about_plane,
    PointCloud,
};

fn pc(v: &[[f64; 3]]) -> PointCloud {
    PointCloud::new(v.to_vec()).unwrap()
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..max).prop_map(|v| PointCloud::new(v).unwrap())
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// Worked by hand: P = {0}, Q = {(1,0,0), (0,2,0)}.
// P->Q nearest: 1. Q->P nearest: 1 and 2.
#[test]
fn hand_computed_metrics() {
    let p = pc(&[[0.0, 0.0, 0.0]]);
    let q = pc(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
    assert_eq!(chamfer_l1(&p, &q), 1.25);
    assert_eq!(chamfer_l2(&p, &q), 3.5);
    assert_eq!(fidelity_distance(&p, &q), 1.0);
    assert_eq!(fidelity_distance(&q, &p), 1.5);
    assert_eq!(f1_score(&p, &q, 0.01).unwrap(), 0.0);
    // precision 1 (the origin is within 1.5 of Q), recall 1/2
    assert!((f1_score(&p, &q, 1.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(mmd(&p, &[q.clone(), pc(&[[0.0, 0.0, 3.0]])]).unwrap(), 3.5);
}

#[test]
fn frozen_knn_on_a_line() {
    let r = pc(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [6.0, 0.0, 0.0]]);
    let q = pc(&[[2.9, 0.0, 0.0], [0.5, 0.0, 0.0]]);
    // 0.5 is equidistant from 0 and 1; ties break by index
    assert_eq!(knn(&q, &r, 3).unwrap(), vec![vec![2, 1, 0], vec![0, 1, 2]]);
}

#[test]
fn frozen_householder() {
    let h = householder([0.0, 3.0, 4.0]).unwrap();
    let want = [1.0, 0.0, 0.0, 0.0, 0.28, -0.96, 0.0, -0.96, -0.28];
    for (a, b) in h.iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{h:?}");
    }
}

#[test]
fn fps_spreads_points_on_a_line() {
    let pts: Vec<[f64; 3]> = (0..11).map(|i| [i as f64, 0.0, 0.0]).collect();
    let idx = fps(&pc(&pts), 3, 0).unwrap();
    assert_eq!(idx, vec![0, 10, 5]);
}

#[test]
fn kernels_match_full_scan_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..25 {
        let (np, nq) = (rng.random_range(1..=512), rng.random_range(1..=512));
        let cloud = |rng: &mut ChaCha8Rng, n: usize| {
            pc(&(0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect::<Vec<_>>())
        };
        let p = cloud(&mut rng, np);
        let q = cloud(&mut rng, nq);
        assert!(rel(chamfer_l1(&p, &q), chamfer_l1_scan(p.points(), q.points())) <= 1e-9);
        assert!(rel(chamfer_l2(&p, &q), chamfer_l2_scan(p.points(), q.points())) <= 1e-9);
        assert!(rel(fidelity_distance(&p, &q), fidelity_scan(p.points(), q.points())) <= 1e-9);
        let k = 8.min(nq);
        assert_eq!(knn(&p, &q, k).unwrap(), knn_scan(p.points(), q.points(), k));
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(PointCloud::new(vec![]).is_err());
    assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
    let p = pc(&[[0.0; 3]]);
    assert!(reflect_about_plane(&p, [0.0; 3]).is_err());
    assert!(f1_score(&p, &p, 0.0).is_err());
    assert!(mmd(&p, &[]).is_err());
    assert!(fps(&p, 2, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chamfer_is_symmetric_and_nonnegative(p in cloud_strategy(60), q in cloud_strategy(60)) {
        let (a, b) = (chamfer_l1(&p, &q), chamfer_l1(&q, &p));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        prop_assert!((chamfer_l2(&p, &q) - chamfer_l2(&q, &p)).abs() <= 1e-12);
        prop_assert_eq!(chamfer_l1(&p, &p), 0.0);
    }

    #[test]
    fn fidelity_vanishes_when_input_is_embedded(p in cloud_strategy(40), extra in cloud_strategy(40)) {
        prop_assert_eq!(fidelity_distance(&p, &p.concat(&extra)), 0.0);
    }

    #[test]
    fn self_f1_is_one(p in cloud_strategy(40)) {
        prop_assert_eq!(f1_score(&p, &p, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn reflection_is_an_involution(p in cloud_strategy(30), n in prop::array::uniform3(-1.0f64..1.0)) {
        prop_assume!(n.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let back = reflect_about_plane(&reflect_about_plane(&p, n).unwrap(), n).unwrap();
        for (a, b) in p.points().iter().zip(back.points()) {
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn householder_is_orthogonal_and_matches_reflection(p in cloud_strategy(20), n in prop::array::uniform3(-1.0f64..1.0)) {
        prop_assume!(n.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let h = householder(n).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                let dot: f64 = (0..3).map(|k| h[r * 3 + k] * h[c * 3 + k]).sum();
                prop_assert!((dot - f64::from(u8::from(r == c))).abs() < 1e-12);
            }
        }
        let refl = reflect_about_plane(&p, n).unwrap();
        for (x, y) in p.points().iter().zip(refl.points()) {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| x[k] * h[k * 3 + c]).sum();
                prop_assert!((v - y[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn knn_rows_are_sorted_and_distinct(q in cloud_strategy(30), r in cloud_strategy(50), k in 1usize..10) {
        let k = k.min(r.len());
        for (qi, row) in knn(&q, &r, k).unwrap().iter().enumerate() {
            prop_assert_eq!(row.len(), k);
            let mut seen = row.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), k);
            let d: Vec<f64> = row.iter().map(|&j| symmcomp::geometry::dist2(&q.get(qi), &r.get(j))).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fps_returns_distinct_indices(p in cloud_strategy(80), m in 1usize..20) {
        let m = m.min(p.len());
        let idx = fps(&p, m, 0).unwrap();
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        prop_assert_eq!(s.len(), m);
    }
}
