//! Brute-force metric oracles shared by the integration tests.

use dvr::evalkit::{RocPoint, SimilarityMatrix};
use dvr::numerics::{Matrix, Rng};

/// Random grid with coarse scores (many ties) whose probe labels all appear in the gallery.
pub fn random_grid(rng: &mut Rng, probes: usize, gallery: usize, levels: u64) -> SimilarityMatrix {
    let gallery_labels: Vec<usize> = (0..gallery).map(|j| j % (gallery / 2).max(1)).collect();
    let probe_labels: Vec<usize> = (0..probes)
        .map(|_| gallery_labels[(rng.next_u64() % gallery as u64) as usize])
        .collect();
    let data = (0..probes * gallery)
        .map(|_| (rng.next_u64() % levels) as f64 / (levels - 1) as f64 * 2.0 - 1.0)
        .collect();
    SimilarityMatrix::new(Matrix::from_vec(probes, gallery, data).unwrap(), probe_labels, gallery_labels).unwrap()
}

pub fn brute_rank1(sim: &SimilarityMatrix) -> f64 {
    let mut hits = 0;
    for i in 0..sim.probe_labels.len() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..sim.gallery_labels.len() {
            best = best.max(sim.scores.get(i, j));
        }
        let mut first = 0;
        while sim.scores.get(i, first) != best {
            first += 1;
        }
        if sim.gallery_labels[first] == sim.probe_labels[i] {
            hits += 1;
        }
    }
    hits as f64 / sim.probe_labels.len() as f64
}

/// Every distinct threshold (plus +inf), counting accepted pairs with a double loop.
pub fn brute_roc(sim: &SimilarityMatrix) -> Vec<RocPoint> {
    let (p, g) = sim.scores.shape();
    let mut thresholds = vec![f64::INFINITY];
    for i in 0..p {
        for j in 0..g {
            let s = sim.scores.get(i, j);
            if !thresholds.contains(&s) {
                thresholds.push(s);
            }
        }
    }
    let mut points = Vec::new();
    for t in thresholds {
        let (mut tp, mut fp, mut ng, mut ni) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..p {
            for j in 0..g {
                let genuine = sim.probe_labels[i] == sim.gallery_labels[j];
                let accept = sim.scores.get(i, j) >= t;
                if genuine {
                    ng += 1;
                    tp += usize::from(accept);
                } else {
                    ni += 1;
                    fp += usize::from(accept);
                }
            }
        }
        points.push(RocPoint {
            threshold: t,
            far: fp as f64 / ni as f64,
            tpr: tp as f64 / ng as f64,
        });
    }
    points.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    points
}

pub fn brute_vr(points: &[RocPoint], far: f64) -> f64 {
    let mut best = 0.0;
    for p in points {
        if p.far <= far && p.tpr > best {
            best = p.tpr;
        }
    }
    best
}
