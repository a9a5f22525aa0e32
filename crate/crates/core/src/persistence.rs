//! Binary checkpoints, dataset containers and the `key = value` config format.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "DVRCKPT1" or "DVRDATA1"
//! version      u16
//! count        u32       number of tensors
//! per tensor:  u32 name length, UTF-8 name, u32 rank, rank × u32 dims,
//!              product(dims) × f64 payload
//! checksum     u64       CRC-64/XZ over every preceding byte
//! ```
//!
//! Integer fields are stored as f64; values wider than 32 bits are split
//! into 32-bit limbs so every value is exact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{DvrError, Result};
use crate::mlp::{Layer, MlpParams};
use crate::numerics::{Matrix, OptimizerKind, OptimizerState, Rng, RngState};
use crate::recognition::{Classifier, LabeledBatch, Modality, RecogParams};
use crate::synthdata::{ProtocolSplit, SynthSpec};
use crate::trainer::{Ablation, EpochRecord, ModelState, Progress, Stage, TrainConfig};
use crate::variational::{DvrLossBreakdown, DvrParams};

pub const CHECKPOINT_MAGIC: &str = "DVRCKPT1";
pub const DATASET_MAGIC: &str = "DVRDATA1";
pub const FORMAT_VERSION: u16 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Writes through `fill` into a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        fill(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        DvrError::io(path, e)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn matrix(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

/// Ordered list of named tensors; names must be unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    entries: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(i).1)
    }

    pub fn encode(&self, magic: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic.as_bytes());
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = CRC64.checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], magic: &'static str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(magic.len(), "magic")? != magic.as_bytes() {
            return Err(DvrError::BadMagic { expected: magic });
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(DvrError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32("tensor count")?;
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
                .map_err(|_| DvrError::Truncated(format!("tensor {i} has a non-UTF-8 name")))?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| DvrError::Truncated(format!("payload of `{name}`")))?;
            let data = r
                .take(n * 8, "payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(DvrError::DuplicateTensor(name));
            }
            entries.push((name, Tensor { dims, data }));
        }
        let body_len = r.pos;
        let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().expect("8 bytes"));
        if r.remaining() != 0 {
            return Err(DvrError::Truncated(format!("{} trailing bytes after checksum", r.remaining())));
        }
        let computed = CRC64.checksum(&bytes[..body_len]);
        if stored != computed {
            return Err(DvrError::Checksum { stored, computed });
        }
        Ok(TensorFile { entries })
    }

    pub fn into_map(self) -> TensorMap {
        TensorMap {
            map: self.entries.into_iter().collect(),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        // The trailing checksum is never part of a field.
        let limit = if what == "checksum" { self.bytes.len() } else { self.bytes.len().saturating_sub(8) };
        if self.pos + n > limit {
            return Err(DvrError::Truncated(format!("ran out of bytes reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decoded tensors, consumed by name; leftovers are an error.
pub struct TensorMap {
    map: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.map.remove(name).ok_or_else(|| DvrError::MissingTensor(name.to_string()))
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        let t = self.take(name)?;
        if t.dims.len() != 1 {
            return Err(DvrError::Incompatible(format!("`{name}` should be rank 1")));
        }
        Ok(t.data)
    }

    fn vector_len(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.vector(name)?;
        if v.len() != len {
            return Err(DvrError::Incompatible(format!("`{name}` has {} entries, expected {len}", v.len())));
        }
        Ok(v)
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let t = self.take(name)?;
        if t.dims.len() != 2 {
            return Err(DvrError::Incompatible(format!("`{name}` should be rank 2")));
        }
        Matrix::from_vec(t.dims[0], t.dims[1], t.data)
    }

    pub fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(extra) => Err(DvrError::Incompatible(format!("unexpected tensor `{extra}`"))),
            None => Ok(()),
        }
    }
}

fn index(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(DvrError::Incompatible(format!("{what} is not a valid count: {v}")))
    }
}

fn u64_limbs(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn u64_from_limbs(lo: f64, hi: f64) -> Result<u64> {
    Ok(index(lo, "limb")? as u64 | (index(hi, "limb")? as u64) << 32)
}

fn push_mlp(file: &mut TensorFile, prefix: &str, p: &MlpParams) {
    for (i, l) in p.layers.iter().enumerate() {
        file.push(format!("{prefix}.{i}.weight"), Tensor::matrix(&l.weight));
        file.push(format!("{prefix}.{i}.bias"), Tensor::vector(l.bias.clone()));
    }
}

fn take_mlp(map: &mut TensorMap, prefix: &str, layers: usize) -> Result<MlpParams> {
    let layers = (0..layers)
        .map(|i| {
            let weight = map.matrix(&format!("{prefix}.{i}.weight"))?;
            let bias = map.vector_len(&format!("{prefix}.{i}.bias"), weight.cols())?;
            Ok(Layer { weight, bias })
        })
        .collect::<Result<Vec<_>>>()?;
    for w in layers.windows(2) {
        if w[0].weight.cols() != w[1].weight.rows() {
            return Err(DvrError::Incompatible(format!("`{prefix}` layer widths do not chain")));
        }
    }
    Ok(MlpParams { layers })
}

fn push_optimizer(file: &mut TensorFile, prefix: &str, opt: &OptimizerState) {
    let [s_lo, s_hi] = u64_limbs(opt.step);
    let hyper = match opt.kind {
        OptimizerKind::SgdMomentum { momentum, weight_decay } => vec![0.0, momentum, weight_decay, 0.0],
        OptimizerKind::Adam { beta1, beta2, eps } => vec![1.0, beta1, beta2, eps],
    };
    let mut head = vec![opt.lr, s_lo, s_hi];
    head.extend(hyper);
    file.push(format!("{prefix}.header"), Tensor::vector(head));
    for (k, b) in opt.first.iter().enumerate() {
        file.push(format!("{prefix}.first.{k}"), Tensor::vector(b.clone()));
    }
    for (k, b) in opt.second.iter().enumerate() {
        file.push(format!("{prefix}.second.{k}"), Tensor::vector(b.clone()));
    }
}

fn take_optimizer(map: &mut TensorMap, prefix: &str, lens: &[usize]) -> Result<OptimizerState> {
    let h = map.vector_len(&format!("{prefix}.header"), 7)?;
    let kind = match h[3] {
        0.0 => OptimizerKind::SgdMomentum {
            momentum: h[4],
            weight_decay: h[5],
        },
        1.0 => OptimizerKind::Adam {
            beta1: h[4],
            beta2: h[5],
            eps: h[6],
        },
        other => return Err(DvrError::Incompatible(format!("`{prefix}` has unknown optimizer code {other}"))),
    };
    let buffers = |map: &mut TensorMap, which: &str| -> Result<Vec<Vec<f64>>> {
        lens.iter()
            .enumerate()
            .map(|(k, &n)| map.vector_len(&format!("{prefix}.{which}.{k}"), n))
            .collect()
    };
    let first = buffers(map, "first")?;
    let second = match kind {
        OptimizerKind::Adam { .. } => buffers(map, "second")?,
        OptimizerKind::SgdMomentum { .. } => Vec::new(),
    };
    Ok(OptimizerState {
        kind,
        lr: h[0],
        step: u64_from_limbs(h[1], h[2])?,
        first,
        second,
    })
}

const HISTORY_COLS: usize = 12;

fn history_row(r: &EpochRecord) -> [f64; HISTORY_COLS] {
    let d = &r.dvr;
    [
        match r.stage {
            Stage::Warmup => 0.0,
            Stage::Main => 1.0,
        },
        r.epoch as f64,
        d.kl_nir,
        d.kl_vis,
        d.recon_l2,
        d.recon_ce,
        d.mean_disc,
        d.corr_align,
        d.ortho,
        d.total,
        r.cls_loss,
        r.ortho_penalty,
    ]
}

fn history_from_row(v: &[f64]) -> Result<EpochRecord> {
    let stage = match v[0] {
        0.0 => Stage::Warmup,
        1.0 => Stage::Main,
        other => return Err(DvrError::Incompatible(format!("unknown stage code {other}"))),
    };
    Ok(EpochRecord {
        stage,
        epoch: index(v[1], "history epoch")?,
        dvr: DvrLossBreakdown {
            kl_nir: v[2],
            kl_vis: v[3],
            recon_l2: v[4],
            recon_ce: v[5],
            mean_disc: v[6],
            corr_align: v[7],
            ortho: v[8],
            total: v[9],
        },
        cls_loss: v[10],
        ortho_penalty: v[11],
    })
}

pub fn state_to_tensors(state: &ModelState) -> TensorFile {
    let mut f = TensorFile::default();
    f.push(
        "layout",
        Tensor::vector(vec![
            state.recog.extractor.layers.len() as f64,
            state.dvr.encoder_nir.layers.len() as f64,
            state.dvr.decoder.layers.len() as f64,
        ]),
    );
    push_mlp(&mut f, "recog.extractor", &state.recog.extractor);
    f.push("recog.classifier.weight", Tensor::matrix(&state.recog.classifier.weight));
    f.push("recog.classifier.bias", Tensor::vector(state.recog.classifier.bias.clone()));
    push_mlp(&mut f, "dvr.encoder_nir", &state.dvr.encoder_nir);
    push_mlp(&mut f, "dvr.encoder_vis", &state.dvr.encoder_vis);
    push_mlp(&mut f, "dvr.decoder", &state.dvr.decoder);
    f.push("dvr.align", Tensor::matrix(&state.dvr.align));
    push_optimizer(&mut f, "opt_recog", &state.opt_recog);
    push_optimizer(&mut f, "opt_dvr", &state.opt_dvr);
    let rs = state.rng.state();
    let mut rng = Vec::with_capacity(8);
    rng.extend(u64_limbs(rs.seed));
    rng.extend(u64_limbs(rs.stream));
    rng.extend(u64_limbs(rs.word_pos as u64));
    rng.extend(u64_limbs((rs.word_pos >> 64) as u64));
    f.push("rng", Tensor::vector(rng));
    let p = state.progress;
    f.push(
        "progress",
        Tensor::vector(vec![
            p.pretrain_epochs as f64,
            p.warmup_epochs as f64,
            f64::from(u8::from(p.warmup_stopped)),
            p.epochs as f64,
        ]),
    );
    f.push(
        "history",
        Tensor {
            dims: vec![state.history.len(), HISTORY_COLS],
            data: state.history.iter().flat_map(history_row).collect(),
        },
    );
    f
}

pub fn state_from_tensors(file: TensorFile) -> Result<ModelState> {
    let mut m = file.into_map();
    let layout = m.vector_len("layout", 3)?;
    let extractor = take_mlp(&mut m, "recog.extractor", index(layout[0], "extractor layers")?)?;
    let weight = m.matrix("recog.classifier.weight")?;
    let bias = m.vector_len("recog.classifier.bias", weight.rows())?;
    let recog = RecogParams {
        extractor,
        classifier: Classifier { weight, bias },
    };
    let enc_layers = index(layout[1], "encoder layers")?;
    let dvr = DvrParams {
        encoder_nir: take_mlp(&mut m, "dvr.encoder_nir", enc_layers)?,
        encoder_vis: take_mlp(&mut m, "dvr.encoder_vis", enc_layers)?,
        decoder: take_mlp(&mut m, "dvr.decoder", index(layout[2], "decoder layers")?)?,
        align: m.matrix("dvr.align")?,
    };
    let opt_recog = take_optimizer(&mut m, "opt_recog", &recog.block_lens())?;
    let opt_dvr = take_optimizer(&mut m, "opt_dvr", &dvr.network_block_lens())?;
    let r = m.vector_len("rng", 8)?;
    let word_pos = u64_from_limbs(r[4], r[5])? as u128 | (u64_from_limbs(r[6], r[7])? as u128) << 64;
    let rng = Rng::from_state(RngState {
        seed: u64_from_limbs(r[0], r[1])?,
        stream: u64_from_limbs(r[2], r[3])?,
        word_pos,
    });
    let p = m.vector_len("progress", 4)?;
    let progress = Progress {
        pretrain_epochs: index(p[0], "pretrain epochs")?,
        warmup_epochs: index(p[1], "warm-up epochs")?,
        warmup_stopped: p[2] != 0.0,
        epochs: index(p[3], "epochs")?,
    };
    let h = m.take("history")?;
    if h.dims.len() != 2 || h.dims[1] != HISTORY_COLS {
        return Err(DvrError::Incompatible("`history` has the wrong shape".into()));
    }
    let history = h.data.chunks_exact(HISTORY_COLS).map(history_from_row).collect::<Result<Vec<_>>>()?;
    m.finish()?;
    let state = ModelState {
        recog,
        dvr,
        opt_recog,
        opt_dvr,
        rng,
        progress,
        history,
    };
    state.check()?;
    Ok(state)
}

pub fn state_to_bytes(state: &ModelState) -> Vec<u8> {
    state_to_tensors(state).encode(CHECKPOINT_MAGIC)
}

pub fn state_from_bytes(bytes: &[u8]) -> Result<ModelState> {
    state_from_tensors(TensorFile::decode(bytes, CHECKPOINT_MAGIC)?)
}

pub fn save_state(state: &ModelState, path: &Path) -> Result<()> {
    let bytes = state_to_bytes(state);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load_state(path: &Path) -> Result<ModelState> {
    state_from_bytes(&fs::read(path).map_err(|e| DvrError::io(path, e))?)
}

fn push_batch(f: &mut TensorFile, prefix: &str, b: &LabeledBatch) {
    f.push(format!("{prefix}.raw"), Tensor::matrix(&b.raw));
    f.push(
        format!("{prefix}.modality"),
        Tensor::vector(b.modality.iter().map(|m| m.code()).collect()),
    );
    f.push(
        format!("{prefix}.labels"),
        Tensor::vector(b.labels.iter().map(|&y| y as f64).collect()),
    );
}

fn take_batch(m: &mut TensorMap, prefix: &str) -> Result<LabeledBatch> {
    let raw = m.matrix(&format!("{prefix}.raw"))?;
    let modality = m
        .vector_len(&format!("{prefix}.modality"), raw.rows())?
        .into_iter()
        .map(Modality::from_code)
        .collect::<Result<Vec<_>>>()?;
    let labels = m
        .vector_len(&format!("{prefix}.labels"), raw.rows())?
        .into_iter()
        .map(|v| index(v, "label"))
        .collect::<Result<Vec<_>>>()?;
    LabeledBatch::new(raw, modality, labels)
}

pub fn split_to_bytes(split: &ProtocolSplit) -> Vec<u8> {
    let mut f = TensorFile::default();
    push_batch(&mut f, "train", &split.train);
    f.push(
        "train_identities",
        Tensor::vector(split.train_identities.iter().map(|&y| y as f64).collect()),
    );
    push_batch(&mut f, "gallery", &split.gallery);
    push_batch(&mut f, "probe", &split.probe);
    f.encode(DATASET_MAGIC)
}

pub fn split_from_bytes(bytes: &[u8]) -> Result<ProtocolSplit> {
    let mut m = TensorFile::decode(bytes, DATASET_MAGIC)?.into_map();
    let train = take_batch(&mut m, "train")?;
    let train_identities = m
        .vector("train_identities")?
        .into_iter()
        .map(|v| index(v, "identity"))
        .collect::<Result<Vec<_>>>()?;
    let split = ProtocolSplit {
        train,
        train_identities,
        gallery: take_batch(&mut m, "gallery")?,
        probe: take_batch(&mut m, "probe")?,
    };
    m.finish()?;
    let widths = [split.train.raw.cols(), split.gallery.raw.cols(), split.probe.raw.cols()];
    if widths.iter().any(|&w| w != widths[0]) {
        return Err(DvrError::Incompatible("dataset parts have different raw widths".into()));
    }
    Ok(split)
}

pub fn save_split(split: &ProtocolSplit, path: &Path) -> Result<()> {
    let bytes = split_to_bytes(split);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load_split(path: &Path) -> Result<ProtocolSplit> {
    split_from_bytes(&fs::read(path).map_err(|e| DvrError::io(path, e))?)
}

/// Everything a config file can set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub synth: SynthSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Sets the one seed shared by data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let s = &self.synth;
        let t = &self.train;
        let hidden: Vec<String> = t.extractor_hidden.iter().map(usize::to_string).collect();
        let mut flags = Vec::new();
        if !t.ablation.dvr {
            flags.push("no-dvr");
        }
        if !t.ablation.mean_disc {
            flags.push("no-meandisc");
        }
        if !t.ablation.corr_align {
            flags.push("no-corralign");
        }
        [
            format!("seed = {}", s.seed),
            format!("synth.num_identities = {}", s.num_identities),
            format!("synth.samples_per_identity = {}", s.samples_per_identity),
            format!("synth.identity_dim = {}", s.identity_dim),
            format!("synth.raw_dim = {}", s.raw_dim),
            format!("synth.identity_noise = {}", s.identity_noise),
            format!("synth.observation_noise = {}", s.observation_noise),
            format!("synth.offset_scale = {}", s.offset_scale),
            format!("synth.train_fraction = {}", s.train_fraction),
            format!("model.feature_dim = {}", t.feature_dim),
            format!("model.latent_dim = {}", t.latent_dim),
            format!("model.extractor_hidden = {}", hidden.join(",")),
            format!("model.init_scale = {}", t.init_scale),
            format!("model.dropout = {}", t.dropout),
            format!("train.lambda1 = {}", t.lambdas.mean_disc),
            format!("train.lambda2 = {}", t.lambdas.corr_align),
            format!("train.lambda3 = {}", t.lambdas.ortho),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.pretrain_epochs = {}", t.pretrain_epochs),
            format!("train.pretrain_lr = {}", t.pretrain_lr),
            format!("train.warmup_epochs = {}", t.warmup_epochs),
            format!("train.warmup_early_stop = {}", t.warmup_early_stop),
            format!("train.epochs = {}", t.epochs),
            format!("train.sgd_lr_start = {}", t.sgd_lr.start),
            format!("train.sgd_lr_end = {}", t.sgd_lr.end),
            format!("train.adam_lr_start = {}", t.adam_lr.start),
            format!("train.adam_lr_end = {}", t.adam_lr.end),
            format!("train.align_lr = {}", t.align_lr),
            format!("train.checkpoint_every = {}", t.checkpoint_every),
            format!("train.ablation = {}", flags.join(",")),
        ]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect()
    }
}

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| DvrError::Parse {
        line,
        message: format!("`{key}`: cannot parse `{v}`"),
    })
}

fn parse_rate(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_value(line, key, v)?;
    if x >= 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(DvrError::Parse {
            line,
            message: format!("`{key}` must be finite and >= 0, got {v}"),
        })
    }
}

fn parse_count(line: usize, key: &str, v: &str, min: usize) -> Result<usize> {
    let x: usize = parse_value(line, key, v)?;
    if x < min {
        return Err(DvrError::Parse {
            line,
            message: format!("`{key}` must be >= {min}, got {x}"),
        });
    }
    Ok(x)
}

/// Parses `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    let mut seen = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| DvrError::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let (key, v) = (key.trim(), value.trim());
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(DvrError::Parse {
                line,
                message: format!("`{key}` already set on line {prev}"),
            });
        }
        let (s, t) = (&mut c.synth, &mut c.train);
        match key {
            "seed" => {
                let seed = parse_value(line, key, v)?;
                s.seed = seed;
                t.seed = seed;
            }
            "synth.num_identities" => s.num_identities = parse_count(line, key, v, 2)?,
            "synth.samples_per_identity" => s.samples_per_identity = parse_count(line, key, v, 1)?,
            "synth.identity_dim" => s.identity_dim = parse_count(line, key, v, 1)?,
            "synth.raw_dim" => s.raw_dim = parse_count(line, key, v, 1)?,
            "synth.identity_noise" => s.identity_noise = parse_rate(line, key, v)?,
            "synth.observation_noise" => s.observation_noise = parse_rate(line, key, v)?,
            "synth.offset_scale" => s.offset_scale = parse_rate(line, key, v)?,
            "synth.train_fraction" => {
                let f = parse_rate(line, key, v)?;
                if !(f > 0.0 && f < 1.0) {
                    return Err(DvrError::Parse {
                        line,
                        message: format!("`{key}` must lie in (0, 1), got {v}"),
                    });
                }
                s.train_fraction = f;
            }
            "model.feature_dim" => t.feature_dim = parse_count(line, key, v, 1)?,
            "model.latent_dim" => t.latent_dim = parse_count(line, key, v, 1)?,
            "model.extractor_hidden" => {
                t.extractor_hidden = v
                    .split(',')
                    .map(str::trim)
                    .filter(|w| !w.is_empty())
                    .map(|w| parse_count(line, key, w, 1))
                    .collect::<Result<Vec<_>>>()?;
            }
            "model.init_scale" => {
                t.init_scale = parse_rate(line, key, v)?;
                if t.init_scale == 0.0 {
                    return Err(DvrError::Parse {
                        line,
                        message: format!("`{key}` must be > 0"),
                    });
                }
            }
            "model.dropout" => {
                t.dropout = parse_rate(line, key, v)?;
                if t.dropout >= 1.0 {
                    return Err(DvrError::Parse {
                        line,
                        message: format!("`{key}` must lie in [0, 1)"),
                    });
                }
            }
            "train.lambda1" => t.lambdas.mean_disc = parse_rate(line, key, v)?,
            "train.lambda2" => t.lambdas.corr_align = parse_rate(line, key, v)?,
            "train.lambda3" => t.lambdas.ortho = parse_rate(line, key, v)?,
            "train.batch_size" => t.batch_size = parse_count(line, key, v, 1)?,
            "train.pretrain_epochs" => t.pretrain_epochs = parse_count(line, key, v, 0)?,
            "train.pretrain_lr" => t.pretrain_lr = parse_rate(line, key, v)?,
            "train.warmup_epochs" => t.warmup_epochs = parse_count(line, key, v, 0)?,
            "train.warmup_early_stop" => t.warmup_early_stop = parse_value(line, key, v)?,
            "train.epochs" => t.epochs = parse_count(line, key, v, 0)?,
            "train.sgd_lr_start" => t.sgd_lr.start = parse_rate(line, key, v)?,
            "train.sgd_lr_end" => t.sgd_lr.end = parse_rate(line, key, v)?,
            "train.adam_lr_start" => t.adam_lr.start = parse_rate(line, key, v)?,
            "train.adam_lr_end" => t.adam_lr.end = parse_rate(line, key, v)?,
            "train.align_lr" => t.align_lr = parse_rate(line, key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_count(line, key, v, 0)?,
            "train.ablation" => {
                t.ablation = Ablation::parse(v).map_err(|e| DvrError::Parse {
                    line,
                    message: e.to_string(),
                })?
            }
            _ => {
                return Err(DvrError::Parse {
                    line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
    }
    let whole_file = |e: DvrError| DvrError::Parse {
        line: 0,
        message: e.to_string(),
    };
    c.synth.validate().map_err(whole_file)?;
    c.train.validate().map_err(whole_file)?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    parse_config(&fs::read_to_string(path).map_err(|e| DvrError::io(path, e))?)
}
