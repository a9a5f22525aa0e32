//! The four-row ablation matrix over several seeds.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::Result;
use crate::evalkit::evaluate;
use crate::persistence::RunConfig;
use crate::synthdata::generate_split;
use crate::trainer::{train, Ablation, ModelState};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub config: &'static str,
    pub seed: u64,
    pub rank1: f64,
    /// In the order of the requested FAR levels.
    pub vr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub far_levels: Vec<f64>,
    pub runs: Vec<AblationRun>,
    /// One row per configuration, in matrix order; `seed` is unused.
    pub medians: Vec<AblationRun>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates one `(configuration, seed)` job, single-threaded.
pub fn run_one(base: &RunConfig, ablation: Ablation, seed: u64, far_levels: &[f64]) -> Result<(f64, Vec<f64>)> {
    let cfg = base.clone().with_seed(seed);
    let split = generate_split(&cfg.synth)?;
    let mut train_cfg = cfg.train;
    train_cfg.ablation = ablation;
    let mut state = ModelState::init(&train_cfg, split.train.raw.cols(), split.num_classes())?;
    train(&mut state, &split.train, &train_cfg, None)?;
    let report = evaluate(&state.recog, &split, far_levels)?;
    Ok((report.rank1, report.vr_at_far.iter().map(|(_, v)| *v).collect()))
}

/// Seeds are `first_seed .. first_seed + seeds`. Jobs run in parallel;
/// results are ordered by configuration, then seed.
pub fn run_ablate(base: &RunConfig, first_seed: u64, seeds: usize, far_levels: &[f64]) -> Result<AblationTable> {
    let jobs: Vec<(usize, u64)> = (0..Ablation::MATRIX.len())
        .flat_map(|c| (0..seeds as u64).map(move |s| (c, first_seed + s)))
        .collect();
    let results: Vec<Result<AblationRun>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let (name, ablation) = Ablation::MATRIX[c];
            let (rank1, vr) = run_one(base, ablation, seed, far_levels)?;
            Ok(AblationRun {
                config: name,
                seed,
                rank1,
                vr,
            })
        })
        .collect();
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let medians = Ablation::MATRIX
        .iter()
        .map(|(name, _)| {
            let rows: Vec<&AblationRun> = runs.iter().filter(|r| r.config == *name).collect();
            AblationRun {
                config: name,
                seed: 0,
                rank1: median(&rows.iter().map(|r| r.rank1).collect::<Vec<_>>()),
                vr: (0..far_levels.len())
                    .map(|i| median(&rows.iter().map(|r| r.vr[i]).collect::<Vec<_>>()))
                    .collect(),
            }
        })
        .collect();
    Ok(AblationTable {
        far_levels: far_levels.to_vec(),
        runs,
        medians,
    })
}

impl AblationTable {
    pub fn median_rank1(&self, config: &str) -> Option<f64> {
        self.medians.iter().find(|r| r.config == config).map(|r| r.rank1)
    }

    /// `config,seed,rank1,vr@far=…` rows; median rows carry `median` as the seed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,rank1");
        for f in &self.far_levels {
            let _ = write!(s, ",vr@far={f}");
        }
        s.push('\n');
        let mut row = |r: &AblationRun, seed: String| {
            let _ = write!(s, "{},{},{}", r.config, seed, r.rank1);
            for v in &r.vr {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        };
        for r in &self.runs {
            row(r, r.seed.to_string());
        }
        for r in &self.medians {
            row(r, "median".into());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
