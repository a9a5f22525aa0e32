//! Finite-difference audit of every analytic gradient, one objective term at a time.

use std::fmt::Write as _;

use crate::error::Result;
use crate::numerics::{finite_diff_grad, max_relative_error, Matrix, Rng};
use crate::recognition::{cls_loss_with_generated, Classifier, RecogParams};
use crate::variational::{draw_noise, dvr_loss_with_noise, DvrDims, DvrLossBreakdown, DvrParams, TermWeights};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Terms of the posterior objective, checked one at a time with unit weight.
pub const DVR_TERMS: [&str; 7] = ["kl_N", "kl_V", "recon_l2", "recon_ce", "mean_disc", "corr_align", "ortho"];

/// Every term reported, including the recognition loss.
pub const ALL_TERMS: [&str; 8] = ["kl_N", "kl_V", "recon_l2", "recon_ce", "mean_disc", "corr_align", "ortho", "cls"];

fn unit_weight(term: &str) -> TermWeights {
    let mut w = TermWeights::NONE;
    match term {
        "kl_N" => w.kl_nir = 1.0,
        "kl_V" => w.kl_vis = 1.0,
        "recon_l2" => w.recon_l2 = 1.0,
        "recon_ce" => w.recon_ce = 1.0,
        "mean_disc" => w.mean_disc = 1.0,
        "corr_align" => w.corr_align = 1.0,
        "ortho" => w.ortho = 1.0,
        other => unreachable!("unknown term {other}"),
    }
    w
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub term: &'static str,
    pub block: &'static str,
    /// Worst relative error over all instances and scalars of the block.
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    pub instances: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < TOLERANCE)
    }

    pub fn failures(&self) -> Vec<&GradcheckRow> {
        self.rows.iter().filter(|r| !(r.max_rel_err < TOLERANCE)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,block,max_rel_err,status\n");
        for r in &self.rows {
            let status = if r.max_rel_err < TOLERANCE { "pass" } else { "FAIL" };
            let _ = writeln!(s, "{},{},{:e},{}", r.term, r.block, r.max_rel_err, status);
        }
        s
    }

    fn merge(&mut self, term: &'static str, block: &'static str, err: f64) {
        match self.rows.iter_mut().find(|r| r.term == term && r.block == block) {
            Some(r) => r.max_rel_err = r.max_rel_err.max(err),
            None => self.rows.push(GradcheckRow {
                term,
                block,
                max_rel_err: err,
            }),
        }
    }
}

/// Sizes of the random instances.
#[derive(Clone, Copy, Debug)]
pub struct InstanceShape {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub batch: usize,
    pub classes: usize,
    pub raw_dim: usize,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            feature_dim: 8,
            latent_dim: 4,
            batch: 4,
            classes: 3,
            raw_dim: 6,
        }
    }
}

/// Runs `instances` random problems. `fault` adds a perturbation to the
/// analytic gradient of the named block, to prove the audit can fail.
pub fn run_gradcheck(seed: u64, instances: usize, shape: InstanceShape, fault: Option<&str>) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        rows: Vec::new(),
        instances,
    };
    for k in 0..instances {
        let mut rng = Rng::substream(seed, k as u64);
        check_dvr_instance(&mut rng, shape, fault, &mut report)?;
        check_cls_instance(&mut rng, shape, fault, &mut report)?;
    }
    Ok(report)
}

fn perturb(grad: &mut [f64], ranges: &[(&'static str, std::ops::Range<usize>)], fault: Option<&str>) {
    if let Some(block) = fault {
        if let Some((_, r)) = ranges.iter().find(|(n, _)| *n == block) {
            grad[r.start] += 1e-3;
        }
    }
}

fn check_dvr_instance(rng: &mut Rng, s: InstanceShape, fault: Option<&str>, report: &mut GradcheckReport) -> Result<()> {
    let dims = DvrDims {
        feature_dim: s.feature_dim,
        latent_dim: s.latent_dim,
    };
    let mut dvr = DvrParams::init(dims, rng, 1.0)?;
    // Move P away from I so the alignment terms have non-trivial gradients.
    dvr.align = dvr.align.add(&rng.normal_matrix(s.latent_dim, s.latent_dim, 0.3))?;
    let x_nir = rng.normal_matrix(s.batch, s.feature_dim, 1.0);
    let x_vis = rng.normal_matrix(s.batch, s.feature_dim, 1.0);
    let labels: Vec<usize> = (0..s.batch).map(|i| i % s.classes).collect();
    let classifier = Classifier::init(s.classes, s.feature_dim, rng, 1.0);
    let (eps_nir, eps_vis) = draw_noise(rng, s.batch, s.latent_dim);
    let flat = dvr.to_flat();
    let ranges = dvr.block_ranges();

    for term in DVR_TERMS {
        let weights = unit_weight(term);
        let eval = |p: &DvrParams| -> Result<(DvrLossBreakdown, DvrParams)> {
            dvr_loss_with_noise(p, &x_nir, &x_vis, &labels, &classifier, weights, &eps_nir, &eps_vis)
        };
        let (_, grads) = eval(&dvr)?;
        let mut analytic = grads.to_flat();
        perturb(&mut analytic, &ranges, fault);
        let mut probe = dvr.clone();
        let numeric = finite_diff_grad(
            |v| {
                probe.set_flat(v);
                eval(&probe).map_or(f64::NAN, |(b, _)| b.total)
            },
            &flat,
            FD_STEP,
        )?;
        for (block, r) in &ranges {
            let (err, _) = max_relative_error(&analytic[r.clone()], &numeric[r.clone()]);
            report.merge(term, block, err);
        }
    }
    Ok(())
}

fn check_cls_instance(rng: &mut Rng, s: InstanceShape, fault: Option<&str>, report: &mut GradcheckReport) -> Result<()> {
    let recog = RecogParams::init(s.raw_dim, &[s.raw_dim + 2], s.feature_dim, s.classes, rng, 1.0)?;
    let raw = rng.normal_matrix(2 * s.batch, s.raw_dim, 1.0);
    let generated: Matrix = rng.normal_matrix(2 * s.batch, s.feature_dim, 1.0);
    let labels: Vec<usize> = (0..2 * s.batch).map(|i| i % s.classes).collect();
    let (_, grads) = cls_loss_with_generated(&recog, &raw, &generated, &labels)?;
    let n_extractor = recog.extractor.num_scalars();
    let total = recog.to_flat().len();
    let ranges = vec![("extractor", 0..n_extractor), ("classifier", n_extractor..total)];
    let mut analytic = grads.to_flat();
    perturb(&mut analytic, &ranges, fault);
    let mut probe = recog.clone();
    let numeric = finite_diff_grad(
        |v| {
            probe.set_flat(v);
            cls_loss_with_generated(&probe, &raw, &generated, &labels).map_or(f64::NAN, |(l, _)| l.total())
        },
        &recog.to_flat(),
        FD_STEP,
    )?;
    for (block, r) in &ranges {
        let (err, _) = max_relative_error(&analytic[r.clone()], &numeric[r.clone()]);
        report.merge("cls", block, err);
    }
    Ok(())
}
