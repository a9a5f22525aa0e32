//! Probe-vs-gallery evaluation on extractor features: cosine similarity
//! grid, rank-1 identification, ROC and verification rate at fixed FAR.

use std::io::Write;
use std::path::Path;

use crate::error::{DvrError, Result};
use crate::numerics::{dot, norm, Matrix};
use crate::persistence::write_atomic;
use crate::recognition::{extract, RecogParams};
use crate::synthdata::ProtocolSplit;

/// FAR levels reported by default: 1% and 0.1%.
pub const DEFAULT_FAR_LEVELS: [f64; 2] = [0.01, 0.001];

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DvrError::invalid("cosine_similarity: dimension mismatch"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DvrError::invalid("cosine_similarity: zero-norm input"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    /// `probe × gallery`.
    pub scores: Matrix,
    pub probe_labels: Vec<usize>,
    pub gallery_labels: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(scores: Matrix, probe_labels: Vec<usize>, gallery_labels: Vec<usize>) -> Result<Self> {
        if scores.rows() != probe_labels.len() || scores.cols() != gallery_labels.len() {
            return Err(DvrError::invalid("similarity labels do not match the grid"));
        }
        Ok(SimilarityMatrix {
            scores,
            probe_labels,
            gallery_labels,
        })
    }

    /// Genuine (label match) and impostor scores.
    pub fn score_pools(&self) -> (Vec<f64>, Vec<f64>) {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for (i, &pl) in self.probe_labels.iter().enumerate() {
            for (j, &gl) in self.gallery_labels.iter().enumerate() {
                let s = self.scores.get(i, j);
                if pl == gl {
                    genuine.push(s);
                } else {
                    impostor.push(s);
                }
            }
        }
        (genuine, impostor)
    }
}

pub fn build_similarity(
    probe: &Matrix,
    probe_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
) -> Result<SimilarityMatrix> {
    if probe.rows() == 0 || gallery.rows() == 0 {
        return Err(DvrError::invalid("empty probe or gallery"));
    }
    if probe.cols() != gallery.cols() {
        return Err(DvrError::invalid("probe and gallery feature widths differ"));
    }
    let normalize = |m: &Matrix, what: &str| -> Result<Matrix> {
        let mut out = m.clone();
        for r in 0..m.rows() {
            let n = norm(m.row(r));
            if n == 0.0 || !n.is_finite() {
                return Err(DvrError::invalid(format!("{what} row {r} has zero or non-finite norm")));
            }
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    };
    let p = normalize(probe, "probe")?;
    let g = normalize(gallery, "gallery")?;
    let scores = p.matmul_t(&g)?.map(|v| v.clamp(-1.0, 1.0));
    SimilarityMatrix::new(scores, probe_labels.to_vec(), gallery_labels.to_vec())
}

/// Fraction of probes whose best gallery match carries their label.
/// Ties go to the lowest gallery index.
pub fn rank1(sim: &SimilarityMatrix) -> Result<f64> {
    if sim.probe_labels.is_empty() {
        return Err(DvrError::invalid("rank1 over an empty probe set"));
    }
    let mut hits = 0usize;
    for (i, &label) in sim.probe_labels.iter().enumerate() {
        if !sim.gallery_labels.contains(&label) {
            return Err(DvrError::invalid(format!("probe label {label} is absent from the gallery")));
        }
        let row = sim.scores.row(i);
        let mut best = 0;
        for (j, &s) in row.iter().enumerate().skip(1) {
            if s > row[best] {
                best = j;
            }
        }
        hits += usize::from(sim.gallery_labels[best] == label);
    }
    Ok(hits as f64 / sim.probe_labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// Pairs scoring `>= threshold` are accepted.
    pub threshold: f64,
    pub far: f64,
    pub tpr: f64,
}

/// Points ordered by decreasing threshold, so FAR and TPR are non-decreasing.
/// The first point (threshold `+∞`) accepts nothing; the last accepts everything.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn from_scores(genuine: &[f64], impostor: &[f64]) -> Result<Self> {
        if genuine.is_empty() || impostor.is_empty() {
            return Err(DvrError::invalid("ROC needs both genuine and impostor pairs"));
        }
        let mut all: Vec<(f64, bool)> = genuine
            .iter()
            .map(|&s| (s, true))
            .chain(impostor.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
        let mut points = vec![RocPoint {
            threshold: f64::INFINITY,
            far: 0.0,
            tpr: 0.0,
        }];
        let (mut tp, mut fp) = (0usize, 0usize);
        let mut i = 0;
        while i < all.len() {
            let t = all[i].0;
            while i < all.len() && all[i].0 == t {
                if all[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            points.push(RocPoint {
                threshold: t,
                far: fp as f64 / ni,
                tpr: tp as f64 / ng,
            });
        }
        Ok(RocCurve { points })
    }

    /// Highest TPR among operating points with FAR `<= far` (step rule, no interpolation).
    pub fn vr_at(&self, far: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.far <= far)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    /// Area under the curve by the trapezoid rule over the step points.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].far - w[0].far) * 0.5 * (w[1].tpr + w[0].tpr))
            .sum()
    }
}

pub fn roc_and_vr(sim: &SimilarityMatrix, far_levels: &[f64]) -> Result<(RocCurve, Vec<(f64, f64)>)> {
    let (genuine, impostor) = sim.score_pools();
    let roc = RocCurve::from_scores(&genuine, &impostor)?;
    let vr = far_levels.iter().map(|&f| (f, roc.vr_at(f))).collect();
    Ok((roc, vr))
}

/// Probability that a positive outscores a negative, ties counted half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    Ok(RocCurve::from_scores(positive, negative)?.auc())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rank1: f64,
    pub vr_at_far: Vec<(f64, f64)>,
    pub roc: RocCurve,
}

impl EvalReport {
    pub fn vr(&self, far: f64) -> Option<f64> {
        self.vr_at_far.iter().find(|(f, _)| *f == far).map(|(_, v)| *v)
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        s.push_str(&format!("rank1,{}\n", self.rank1));
        for (far, vr) in &self.vr_at_far {
            s.push_str(&format!("vr@far={far},{vr}\n"));
        }
        s
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("threshold,far,tpr\n");
        for p in &self.roc.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.tpr));
        }
        s
    }

    /// Writes `metrics.csv` and `roc.csv` under `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), |w| w.write_all(self.metrics_csv().as_bytes()))?;
        write_atomic(&dir.join("roc.csv"), |w| w.write_all(self.roc_csv().as_bytes()))
    }
}

/// Full protocol: NIR probes against the VIS gallery on `f(·; Θ)` features.
pub fn evaluate(recog: &RecogParams, split: &ProtocolSplit, far_levels: &[f64]) -> Result<EvalReport> {
    if split.probe.raw.cols() != recog.raw_dim() {
        return Err(DvrError::Incompatible(format!(
            "dataset raw width {} vs extractor input {}",
            split.probe.raw.cols(),
            recog.raw_dim()
        )));
    }
    let probe = extract(recog, &split.probe.raw)?;
    let gallery = extract(recog, &split.gallery.raw)?;
    let sim = build_similarity(&probe, &split.probe.labels, &gallery, &split.gallery.labels)?;
    let (roc, vr_at_far) = roc_and_vr(&sim, far_levels)?;
    Ok(EvalReport {
        rank1: rank1(&sim)?,
        vr_at_far,
        roc,
    })
}
