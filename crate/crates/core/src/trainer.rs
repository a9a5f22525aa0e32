//! Alternating optimization of the recognition network `(Θ, W)`, the
//! posterior networks and decoder, and the alignment matrix `P`.
//!
//! A run is: softmax pretraining of `(Θ, W)`, a warm-up of the posterior
//! networks with the pairing terms switched off, then the main epochs. Each
//! main batch runs three phases in order: recognition (SGD), posterior
//! (Adam) and alignment (plain gradient descent). Progress counters live in
//! [`ModelState`], so a restored state resumes exactly where it stopped.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{DvrError, Result};
use crate::numerics::{Matrix, OptimizerState, Rng};
use crate::persistence::save_state;
use crate::recognition::{cls_loss_with_generated_train, extract, softmax_xent, LabeledBatch, Modality, RecogParams};
use crate::variational::{
    align_objective, dvr_loss, encode, generate_pair, ortho_penalty, DvrDims, DvrLossBreakdown, DvrParams, Lambdas,
};

/// ChaCha stream reserved for training randomness; data generation uses others.
pub const TRAIN_STREAM: u64 = u64::MAX - 1;

/// Which DVR ingredients are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Generated features, posterior training and the warm-up.
    pub dvr: bool,
    pub mean_disc: bool,
    /// Correlation alignment together with the orthogonality penalty and `P` updates.
    pub corr_align: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        dvr: true,
        mean_disc: true,
        corr_align: true,
    };
    pub const BASELINE: Ablation = Ablation {
        dvr: false,
        mean_disc: false,
        corr_align: false,
    };

    /// The four rows of the ablation matrix, from baseline to full model.
    pub const MATRIX: [(&'static str, Ablation); 4] = [
        ("baseline", Ablation::BASELINE),
        (
            "dvr",
            Ablation {
                dvr: true,
                mean_disc: false,
                corr_align: false,
            },
        ),
        (
            "dvr+meandisc",
            Ablation {
                dvr: true,
                mean_disc: true,
                corr_align: false,
            },
        ),
        ("dvr+meandisc+corralign", Ablation::FULL),
    ];

    /// Parses a comma list of `no-dvr`, `no-meandisc`, `no-corralign`.
    pub fn parse(flags: &str) -> Result<Self> {
        let mut a = Ablation::FULL;
        for flag in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "no-dvr" => a.dvr = false,
                "no-meandisc" => a.mean_disc = false,
                "no-corralign" => a.corr_align = false,
                other => return Err(DvrError::invalid(format!("unknown ablation flag `{other}`"))),
            }
        }
        Ok(a)
    }

    /// `λ` after switching off disabled terms.
    pub fn effective(&self, l: Lambdas) -> Lambdas {
        if !self.dvr {
            return Lambdas::ZERO;
        }
        Lambdas {
            mean_disc: if self.mean_disc { l.mean_disc } else { 0.0 },
            corr_align: if self.corr_align { l.corr_align } else { 0.0 },
            ortho: if self.corr_align { l.ortho } else { 0.0 },
        }
    }
}

/// Linear interpolation from `start` (first epoch) to `end` (last epoch).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        let t = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
        self.start + (self.end - self.start) * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambdas: Lambdas,
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub extractor_hidden: Vec<usize>,
    /// Initialization gain for all weight matrices.
    pub init_scale: f64,
    pub dropout: f64,
    /// Pairs per batch in the warm-up and main stages, rows in pretraining.
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub warmup_epochs: usize,
    /// Stop the warm-up early once it improves by less than 0.1% over 3 epochs.
    pub warmup_early_stop: bool,
    pub epochs: usize,
    pub sgd_lr: LrSchedule,
    pub adam_lr: LrSchedule,
    pub align_lr: f64,
    pub seed: u64,
    /// Save a checkpoint after every this many completed epochs; 0 disables.
    pub checkpoint_every: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: Lambdas::default(),
            feature_dim: 16,
            latent_dim: 32,
            extractor_hidden: vec![64],
            init_scale: 1.0,
            dropout: 0.0,
            batch_size: 16,
            pretrain_epochs: 10,
            pretrain_lr: 0.05,
            warmup_epochs: 10,
            warmup_early_stop: false,
            epochs: 40,
            sgd_lr: LrSchedule { start: 0.05, end: 0.025 },
            adam_lr: LrSchedule { start: 1e-2, end: 1e-3 },
            align_lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            ablation: Ablation::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        if self.batch_size == 0 || self.feature_dim == 0 || self.latent_dim == 0 {
            return Err(DvrError::invalid("batch_size, feature_dim and latent_dim must be >= 1"));
        }
        if self.extractor_hidden.contains(&0) {
            return Err(DvrError::invalid("extractor hidden widths must be >= 1"));
        }
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("sgd_lr.start", self.sgd_lr.start),
            ("sgd_lr.end", self.sgd_lr.end),
            ("adam_lr.start", self.adam_lr.start),
            ("adam_lr.end", self.adam_lr.end),
            ("align_lr", self.align_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DvrError::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(DvrError::invalid("init_scale must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DvrError::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn dropout_rate(&self) -> Option<f64> {
        (self.dropout > 0.0).then_some(self.dropout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Main,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Main => "main",
        }
    }
}

/// Batch-averaged losses of one completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Index within its stage.
    pub epoch: usize,
    /// DVR terms; `total` is weighted by the `λ` in force during the stage.
    pub dvr: DvrLossBreakdown,
    pub cls_loss: f64,
    /// `‖PᵀP − I‖²_F` at the end of the epoch.
    pub ortho_penalty: f64,
}

/// Column order of [`TrainLog::to_csv`].
pub const LOG_COLUMNS: [&str; 12] = [
    "stage",
    "epoch",
    "kl_nir",
    "kl_vis",
    "recon_l2",
    "recon_ce",
    "mean_disc",
    "corr_align",
    "ortho",
    "total",
    "cls_loss",
    "ortho_penalty",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Seconds per record, for the epochs run in this process (0 for restored ones).
    pub wall_seconds: Vec<f64>,
}

impl TrainLog {
    /// One row per record. Wall time is left out so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut s = LOG_COLUMNS.join(",");
        s.push('\n');
        for r in &self.records {
            let d = &r.dvr;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.stage.name(),
                r.epoch,
                d.kl_nir,
                d.kl_vis,
                d.recon_l2,
                d.recon_ce,
                d.mean_disc,
                d.corr_align,
                d.ortho,
                d.total,
                r.cls_loss,
                r.ortho_penalty
            ));
        }
        s
    }
}

/// Completed work, in epochs per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Progress {
    pub pretrain_epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_stopped: bool,
    pub epochs: usize,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub recog: RecogParams,
    pub dvr: DvrParams,
    /// SGD over extractor and classifier blocks.
    pub opt_recog: OptimizerState,
    /// Adam over encoder and decoder blocks.
    pub opt_dvr: OptimizerState,
    pub rng: Rng,
    pub progress: Progress,
    pub history: Vec<EpochRecord>,
}

impl ModelState {
    pub fn init(config: &TrainConfig, raw_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::substream(config.seed, TRAIN_STREAM);
        let recog = RecogParams::init(
            raw_dim,
            &config.extractor_hidden,
            config.feature_dim,
            num_classes,
            &mut rng,
            config.init_scale,
        )?;
        let dims = DvrDims {
            feature_dim: config.feature_dim,
            latent_dim: config.latent_dim,
        };
        let dvr = DvrParams::init(dims, &mut rng, config.init_scale)?;
        let opt_recog = OptimizerState::sgd(config.pretrain_lr, &recog.block_lens());
        let opt_dvr = OptimizerState::adam(config.adam_lr.start, &dvr.network_block_lens());
        Ok(ModelState {
            recog,
            dvr,
            opt_recog,
            opt_dvr,
            rng,
            progress: Progress::default(),
            history: Vec::new(),
        })
    }

    /// Shapes of every part agree with each other.
    pub fn check(&self) -> Result<()> {
        self.dvr.check()?;
        self.recog.extractor_spec(None)?;
        if self.recog.classifier.input_dim() != self.recog.feature_dim() {
            return Err(DvrError::Incompatible("classifier width differs from extractor output".into()));
        }
        if self.dvr.dims().feature_dim != self.recog.feature_dim() {
            return Err(DvrError::Incompatible("posterior input width differs from extractor output".into()));
        }
        let lens_ok = |opt: &OptimizerState, lens: Vec<usize>| {
            opt.first.iter().map(Vec::len).eq(lens.iter().copied())
                && (opt.second.is_empty() || opt.second.iter().map(Vec::len).eq(lens.iter().copied()))
        };
        if !lens_ok(&self.opt_recog, self.recog.block_lens()) || !lens_ok(&self.opt_dvr, self.dvr.network_block_lens()) {
            return Err(DvrError::Incompatible("optimizer buffers do not match parameter blocks".into()));
        }
        Ok(())
    }

    pub fn log(&self) -> TrainLog {
        TrainLog {
            records: self.history.clone(),
            wall_seconds: vec![0.0; self.history.len()],
        }
    }

    fn completed_epochs(&self) -> usize {
        self.progress.warmup_epochs + self.progress.epochs
    }
}

/// Same-identity (NIR row, VIS row) pairs: the i-th NIR sample of a class
/// with its i-th VIS sample.
pub fn identity_pairs(train: &LabeledBatch) -> Vec<(usize, usize)> {
    let classes = train.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut nir = vec![Vec::new(); classes];
    let mut vis = vec![Vec::new(); classes];
    for (r, (&y, &m)) in train.labels.iter().zip(&train.modality).enumerate() {
        match m {
            Modality::Nir => nir[y].push(r),
            Modality::Vis => vis[y].push(r),
        }
    }
    nir.iter()
        .zip(&vis)
        .flat_map(|(n, v)| n.iter().copied().zip(v.iter().copied()))
        .collect()
}

struct PairBatch {
    raw_nir: Matrix,
    raw_vis: Matrix,
    labels: Vec<usize>,
}

fn pair_batches(train: &LabeledBatch, pairs: &[(usize, usize)], batch_size: usize, rng: &mut Rng) -> Vec<PairBatch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let nir: Vec<usize> = chunk.iter().map(|&i| pairs[i].0).collect();
            let vis: Vec<usize> = chunk.iter().map(|&i| pairs[i].1).collect();
            PairBatch {
                raw_nir: train.raw.select_rows(&nir),
                raw_vis: train.raw.select_rows(&vis),
                labels: nir.iter().map(|&r| train.labels[r]).collect(),
            }
        })
        .collect()
}

fn check_train_set(state: &ModelState, train: &LabeledBatch) -> Result<Vec<(usize, usize)>> {
    if train.is_empty() {
        return Err(DvrError::invalid("empty training set"));
    }
    if train.raw.cols() != state.recog.raw_dim() {
        return Err(DvrError::Incompatible(format!(
            "training rows have width {}, extractor expects {}",
            train.raw.cols(),
            state.recog.raw_dim()
        )));
    }
    if let Some(&y) = train.labels.iter().find(|&&y| y >= state.recog.classifier.num_classes()) {
        return Err(DvrError::Incompatible(format!(
            "label {y} exceeds the classifier's {} classes",
            state.recog.classifier.num_classes()
        )));
    }
    let pairs = identity_pairs(train);
    if pairs.is_empty() {
        return Err(DvrError::invalid("training set has no same-identity NIR/VIS pairs"));
    }
    Ok(pairs)
}

fn finite_or(value: f64, phase: &str, term: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DvrError::numeric(phase, term))
    }
}

/// Debug-build guard: the parameters a phase must not touch are bit-identical afterwards.
macro_rules! assert_frozen {
    ($before:expr, $after:expr, $phase:literal) => {
        debug_assert!($before == $after, "{} phase modified frozen parameters", $phase);
    };
}

fn recog_step(state: &mut ModelState, grads: &RecogParams, lr: f64) -> Result<()> {
    state.opt_recog.lr = lr;
    let g = grads.blocks();
    state.opt_recog.step(&mut state.recog.blocks_mut(), &g)
}

fn dvr_step(state: &mut ModelState, grads: &DvrParams, lr: f64) -> Result<()> {
    state.opt_dvr.lr = lr;
    let g = grads.network_blocks();
    state.opt_dvr.step(&mut state.dvr.network_blocks_mut(), &g)
}

/// Plain softmax training of `(Θ, W)` on every training row.
pub fn pretrain(state: &mut ModelState, train: &LabeledBatch, config: &TrainConfig) -> Result<()> {
    check_train_set(state, train)?;
    let empty = Matrix::zeros(0, state.recog.feature_dim());
    while state.progress.pretrain_epochs < config.pretrain_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        state.rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = train.subset(chunk);
            let (loss, grads) = cls_loss_with_generated_train(
                &state.recog,
                &batch.raw,
                &empty,
                &batch.labels,
                config.dropout_rate(),
                Some(&mut state.rng),
            )?;
            finite_or(loss.real, "pretrain", "cls_real")?;
            recog_step(state, &grads, config.pretrain_lr)?;
        }
        state.progress.pretrain_epochs += 1;
    }
    Ok(())
}

#[derive(Default)]
struct Accum {
    sum: DvrLossBreakdown,
    cls: f64,
    batches: usize,
}

impl Accum {
    fn add(&mut self, d: &DvrLossBreakdown, cls: f64) {
        let s = &mut self.sum;
        s.kl_nir += d.kl_nir;
        s.kl_vis += d.kl_vis;
        s.recon_l2 += d.recon_l2;
        s.recon_ce += d.recon_ce;
        s.mean_disc += d.mean_disc;
        s.corr_align += d.corr_align;
        s.ortho += d.ortho;
        s.total += d.total;
        self.cls += cls;
        self.batches += 1;
    }

    fn record(self, stage: Stage, epoch: usize, align: &Matrix) -> Result<EpochRecord> {
        let n = self.batches.max(1) as f64;
        let s = self.sum;
        Ok(EpochRecord {
            stage,
            epoch,
            dvr: DvrLossBreakdown {
                kl_nir: s.kl_nir / n,
                kl_vis: s.kl_vis / n,
                recon_l2: s.recon_l2 / n,
                recon_ce: s.recon_ce / n,
                mean_disc: s.mean_disc / n,
                corr_align: s.corr_align / n,
                ortho: s.ortho / n,
                total: s.total / n,
            },
            cls_loss: self.cls / n,
            ortho_penalty: ortho_penalty(align)?,
        })
    }
}

fn warmup_epoch(state: &mut ModelState, train: &LabeledBatch, pairs: &[(usize, usize)], config: &TrainConfig) -> Result<EpochRecord> {
    let mut acc = Accum::default();
    let epoch = state.progress.warmup_epochs;
    if config.ablation.dvr {
        let lr = config.adam_lr.start;
        for batch in pair_batches(train, pairs, config.batch_size, &mut state.rng) {
            let x_nir = extract(&state.recog, &batch.raw_nir)?;
            let x_vis = extract(&state.recog, &batch.raw_vis)?;
            let cls = softmax_xent(&state.recog.classifier, &x_nir.vstack(&x_vis)?, &[batch.labels.clone(), batch.labels.clone()].concat())?.loss;
            let (parts, grads) = dvr_loss(
                &state.dvr,
                &x_nir,
                &x_vis,
                &batch.labels,
                &state.recog.classifier,
                Lambdas::ZERO,
                &mut state.rng,
            )?;
            let align_before = cfg!(debug_assertions).then(|| state.dvr.align.clone());
            dvr_step(state, &grads, lr)?;
            if let Some(before) = align_before {
                assert_frozen!(before, state.dvr.align, "warm-up");
            }
            acc.add(&parts, cls);
        }
    }
    acc.record(Stage::Warmup, epoch, &state.dvr.align)
}

/// Trains the posterior networks with the pairing terms off, until
/// `config.warmup_epochs` are done or the optional early stop fires.
/// `(Θ, W)` and `P` are left untouched. Without the DVR ablation flag
/// each epoch is a no-op that only advances the counter.
pub fn warmup_dvr(state: &mut ModelState, train: &LabeledBatch, config: &TrainConfig) -> Result<()> {
    let pairs = check_train_set(state, train)?;
    while state.progress.warmup_epochs < config.warmup_epochs && !state.progress.warmup_stopped {
        let before = cfg!(debug_assertions).then(|| state.recog.clone());
        let record = warmup_epoch(state, train, &pairs, config)?;
        if let Some(before) = before {
            assert_frozen!(before, state.recog, "warm-up");
        }
        state.history.push(record);
        state.progress.warmup_epochs += 1;
        if config.warmup_early_stop && warmup_converged(&state.history) {
            state.progress.warmup_stopped = true;
        }
    }
    Ok(())
}

fn warmup_converged(history: &[EpochRecord]) -> bool {
    let totals: Vec<f64> = history
        .iter()
        .filter(|r| r.stage == Stage::Warmup)
        .map(|r| r.dvr.total)
        .collect();
    if totals.len() < 4 {
        return false;
    }
    let then = totals[totals.len() - 4];
    let now = totals[totals.len() - 1];
    then - now < 1e-3 * then.abs()
}

/// One main epoch over shuffled same-identity pair batches.
pub fn train_epoch(state: &mut ModelState, train: &LabeledBatch, config: &TrainConfig) -> Result<()> {
    let pairs = check_train_set(state, train)?;
    let epoch = state.progress.epochs;
    let sgd_lr = config.sgd_lr.at(epoch, config.epochs);
    let adam_lr = config.adam_lr.at(epoch, config.epochs);
    let lambdas = config.ablation.effective(config.lambdas);
    let use_dvr = config.ablation.dvr;
    let feature_dim = state.recog.feature_dim();
    let mut acc = Accum::default();

    for batch in pair_batches(train, &pairs, config.batch_size, &mut state.rng) {
        let raw = batch.raw_nir.vstack(&batch.raw_vis)?;
        let labels2 = [batch.labels.clone(), batch.labels.clone()].concat();

        // (a) generated features from the current posterior networks.
        let generated = if use_dvr {
            let x_nir = extract(&state.recog, &batch.raw_nir)?;
            let x_vis = extract(&state.recog, &batch.raw_vis)?;
            let (g_nir, g_vis) = generate_pair(&state.dvr, &x_nir, &x_vis, &mut state.rng)?;
            let g = g_nir.vstack(&g_vis)?;
            if !g.is_finite() {
                return Err(DvrError::numeric("generation", "x_hat"));
            }
            g
        } else {
            Matrix::zeros(0, feature_dim)
        };

        // (b) recognition phase.
        let dvr_before = cfg!(debug_assertions).then(|| state.dvr.clone());
        let (cls, grads) = cls_loss_with_generated_train(
            &state.recog,
            &raw,
            &generated,
            &labels2,
            config.dropout_rate(),
            Some(&mut state.rng),
        )?;
        finite_or(cls.real, "recognition", "cls_real")?;
        finite_or(cls.generated, "recognition", "cls_generated")?;
        recog_step(state, &grads, sgd_lr)?;
        if let Some(before) = dvr_before {
            assert_frozen!(before, state.dvr, "recognition");
        }

        if !use_dvr {
            acc.add(&DvrLossBreakdown::default(), cls.total());
            continue;
        }

        // (c) features from the updated extractor, (d) posterior phase.
        let x_nir = extract(&state.recog, &batch.raw_nir)?;
        let x_vis = extract(&state.recog, &batch.raw_vis)?;
        let recog_before = cfg!(debug_assertions).then(|| state.recog.clone());
        let align_before = cfg!(debug_assertions).then(|| state.dvr.align.clone());
        let (parts, grads) = dvr_loss(
            &state.dvr,
            &x_nir,
            &x_vis,
            &batch.labels,
            &state.recog.classifier,
            lambdas,
            &mut state.rng,
        )?;
        dvr_step(state, &grads, adam_lr)?;
        if let (Some(r), Some(a)) = (recog_before, align_before) {
            assert_frozen!(r, state.recog, "posterior");
            assert_frozen!(a, state.dvr.align, "posterior");
        }

        // (e) alignment phase on posteriors from the updated encoders.
        if config.ablation.corr_align {
            let networks_before = cfg!(debug_assertions).then(|| (state.recog.clone(), state.dvr.network_blocks().concat()));
            let sigma_nir = encode(&state.dvr.encoder_nir, &x_nir)?.sigma();
            let sigma_vis = encode(&state.dvr.encoder_vis, &x_vis)?.sigma();
            let (value, grad) = align_objective(&sigma_nir, &sigma_vis, &state.dvr.align, lambdas)?;
            finite_or(value, "alignment", "corr_align")?;
            let step = grad.scale(config.align_lr);
            state.dvr.align = state.dvr.align.sub(&step)?;
            if !state.dvr.align.is_finite() {
                return Err(DvrError::numeric("alignment", "P"));
            }
            if let Some((r, n)) = networks_before {
                assert_frozen!(r, state.recog, "alignment");
                assert_frozen!(n, state.dvr.network_blocks().concat(), "alignment");
            }
        }
        acc.add(&parts, cls.total());
    }
    state.history.push(acc.record(Stage::Main, epoch, &state.dvr.align)?);
    state.progress.epochs += 1;
    Ok(())
}

fn checkpoint_path(dir: &Path, completed: usize) -> PathBuf {
    dir.join(format!("epoch-{completed:04}.ckpt"))
}

/// Runs whatever remains of pretraining, warm-up and the main epochs.
///
/// With `checkpoint_dir` set and a nonzero cadence, the state is saved
/// after every `checkpoint_every`-th completed warm-up or main epoch.
pub fn train(
    state: &mut ModelState,
    train_set: &LabeledBatch,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    config.validate()?;
    state.check()?;
    let mut log = state.log();
    let mut stamp = Instant::now();
    let mut after_epoch = |state: &ModelState, log: &mut TrainLog| -> Result<()> {
        for r in &state.history[log.records.len()..] {
            log.records.push(r.clone());
            log.wall_seconds.push(stamp.elapsed().as_secs_f64());
            stamp = Instant::now();
        }
        let done = state.completed_epochs();
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && done.is_multiple_of(config.checkpoint_every) {
                save_state(state, &checkpoint_path(dir, done))?;
            }
        }
        Ok(())
    };

    pretrain(state, train_set, config)?;
    while state.progress.warmup_epochs < config.warmup_epochs && !state.progress.warmup_stopped {
        let target = state.progress.warmup_epochs + 1;
        let limited = TrainConfig {
            warmup_epochs: target,
            ..config.clone()
        };
        warmup_dvr(state, train_set, &limited)?;
        after_epoch(state, &mut log)?;
    }
    while state.progress.epochs < config.epochs {
        train_epoch(state, train_set, config)?;
        after_epoch(state, &mut log)?;
    }
    Ok(log)
}

/// Mean DVR objective over the whole training set with noise from a fixed
/// seed, so values from different states are comparable.
pub fn evaluate_dvr_loss(state: &ModelState, train: &LabeledBatch, lambdas: Lambdas, noise_seed: u64) -> Result<DvrLossBreakdown> {
    let pairs = check_train_set(state, train)?;
    let nir: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let vis: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let x_nir = extract(&state.recog, &train.raw.select_rows(&nir))?;
    let x_vis = extract(&state.recog, &train.raw.select_rows(&vis))?;
    let labels: Vec<usize> = nir.iter().map(|&r| train.labels[r]).collect();
    let mut rng = Rng::new(noise_seed);
    let (parts, _) = dvr_loss(&state.dvr, &x_nir, &x_vis, &labels, &state.recog.classifier, lambdas, &mut rng)?;
    Ok(parts)
}
