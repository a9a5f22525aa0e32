//! Rank-1 and ROC against sort-free brute-force reimplementations.

mod common;

use common::{brute_roc, brute_rank1, brute_vr, random_grid};
use dvr::evalkit::{build_similarity, rank1, roc_and_vr};
use dvr::numerics::{Matrix, Rng};
use proptest::prelude::*;

#[test]
fn hundred_random_grids_match_brute_force_exactly() {
    let mut rng = Rng::new(2024);
    let levels = [0.0, 0.01, 0.05, 0.1, 0.25, 0.5, 1.0];
    for k in 0..100 {
        let probes = 1 + (rng.next_u64() % 20) as usize;
        let gallery = 2 + (rng.next_u64() % 9) as usize;
        let sim = random_grid(&mut rng, probes, gallery, 5 + k % 40);
        let (genuine, impostor) = sim.score_pools();
        assert_eq!(rank1(&sim).unwrap(), brute_rank1(&sim), "grid {k}");
        if genuine.is_empty() || impostor.is_empty() {
            assert!(roc_and_vr(&sim, &levels).is_err());
            continue;
        }
        let (roc, vr) = roc_and_vr(&sim, &levels).unwrap();
        let oracle = brute_roc(&sim);
        assert_eq!(roc.points, oracle, "grid {k}");
        for (f, v) in vr {
            assert_eq!(v, brute_vr(&oracle, f), "grid {k}, far {f}");
        }
        for w in roc.points.windows(2) {
            assert!(w[1].far >= w[0].far && w[1].tpr >= w[0].tpr, "grid {k} not monotone");
        }
        let last = roc.points.last().unwrap();
        assert_eq!((last.far, last.tpr), (1.0, 1.0));
        assert!(roc.points.iter().all(|p| (0.0..=1.0).contains(&p.far) && (0.0..=1.0).contains(&p.tpr)));
    }
}

fn features(rng: &mut Rng, rows: usize, dim: usize) -> Matrix {
    rng.normal_matrix(rows, dim, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank1_invariant_to_positive_rescaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = Rng::new(seed);
        let probe = features(&mut rng, 12, 5);
        let gallery = features(&mut rng, 6, 5);
        let pl: Vec<usize> = (0..12).map(|i| i % 6).collect();
        let gl: Vec<usize> = (0..6).collect();
        let base = rank1(&build_similarity(&probe, &pl, &gallery, &gl).unwrap()).unwrap();
        let scaled = rank1(&build_similarity(&probe.scale(scale), &pl, &gallery, &gl).unwrap()).unwrap();
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn gallery_permutation_leaves_metrics_unchanged(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let probe = features(&mut rng, 10, 4);
        let gallery = features(&mut rng, 5, 4);
        let pl: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let gl: Vec<usize> = (0..5).collect();
        let mut perm: Vec<usize> = (0..5).collect();
        rng.shuffle(&mut perm);
        let gl_perm: Vec<usize> = perm.iter().map(|&j| gl[j]).collect();
        let a = build_similarity(&probe, &pl, &gallery, &gl).unwrap();
        let b = build_similarity(&probe, &pl, &gallery.select_rows(&perm), &gl_perm).unwrap();
        // Continuous scores: ties have probability zero, so the tie rule never applies.
        prop_assert_eq!(rank1(&a).unwrap(), rank1(&b).unwrap());
        let (ra, va) = roc_and_vr(&a, &[0.01, 0.1]).unwrap();
        let (rb, vb) = roc_and_vr(&b, &[0.01, 0.1]).unwrap();
        prop_assert_eq!(va, vb);
        prop_assert_eq!(ra.points.len(), rb.points.len());
        for (p, q) in ra.points.iter().zip(&rb.points) {
            prop_assert_eq!((p.far, p.tpr), (q.far, q.tpr));
            prop_assert!((p.threshold - q.threshold).abs() < 1e-12 || p.threshold == q.threshold);
        }
    }

    #[test]
    fn similarity_entries_bounded(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = features(&mut rng, 7, 3);
        let g = features(&mut rng, 4, 3);
        let sim = build_similarity(&p, &[0; 7], &g, &[0, 1, 2, 3]).unwrap();
        prop_assert!(sim.scores.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
