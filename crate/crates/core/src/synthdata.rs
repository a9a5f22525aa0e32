//! Two-modality synthetic identities with a known linear factor structure.
//!
//! Every identity `y` owns a code `c_y ~ N(0, I_k)`. A sample of modality
//! `m` is `A_m (c_y + η_id) + b_m + η_obs`, where `A_m` has orthonormal
//! columns. Identity `y` draws from its own ChaCha stream, so the output
//! does not depend on generation order.

use crate::error::{DvrError, Result};
use crate::numerics::{dot, Matrix, Rng};
use crate::recognition::{LabeledBatch, Modality};

const MAPS_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub identity_dim: usize,
    pub raw_dim: usize,
    pub identity_noise: f64,
    pub observation_noise: f64,
    /// Expected Euclidean norm of each modality offset `b_m`.
    pub offset_scale: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_identities: 40,
            samples_per_identity: 10,
            identity_dim: 8,
            raw_dim: 32,
            identity_noise: 0.1,
            observation_noise: 0.05,
            offset_scale: 1.0,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.samples_per_identity == 0 || self.identity_dim == 0 || self.raw_dim == 0 {
            return Err(DvrError::invalid("synthetic dimensions and counts must be >= 1"));
        }
        if self.identity_dim > self.raw_dim {
            return Err(DvrError::invalid("identity_dim cannot exceed raw_dim"));
        }
        for (name, v) in [
            ("identity_noise", self.identity_noise),
            ("observation_noise", self.observation_noise),
            ("offset_scale", self.offset_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DvrError::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(DvrError::invalid("train_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// The per-modality linear maps `A_N`, `A_V` (`raw_dim × k`) and offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityMaps {
    pub map_nir: Matrix,
    pub map_vis: Matrix,
    pub offset_nir: Vec<f64>,
    pub offset_vis: Vec<f64>,
}

impl ModalityMaps {
    pub fn draw(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::substream(spec.seed, MAPS_STREAM);
        let map_nir = orthonormal_columns(&mut rng, spec.raw_dim, spec.identity_dim);
        let map_vis = orthonormal_columns(&mut rng, spec.raw_dim, spec.identity_dim);
        let sd = spec.offset_scale / (spec.raw_dim as f64).sqrt();
        let offset_nir = rng.normal_matrix(1, spec.raw_dim, sd).into_data();
        let offset_vis = rng.normal_matrix(1, spec.raw_dim, sd).into_data();
        Ok(ModalityMaps {
            map_nir,
            map_vis,
            offset_nir,
            offset_vis,
        })
    }

    fn for_modality(&self, m: Modality) -> (&Matrix, &[f64]) {
        match m {
            Modality::Nir => (&self.map_nir, &self.offset_nir),
            Modality::Vis => (&self.map_vis, &self.offset_vis),
        }
    }
}

/// Gaussian matrix with columns orthonormalized by modified Gram-Schmidt.
fn orthonormal_columns(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let g = rng.normal_matrix(cols, rows, 1.0);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
        for c in 0..cols {
            let mut v = g.row(c).to_vec();
            for q in &basis {
                let proj = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
            let n = dot(&v, &v).sqrt();
            if n < 1e-8 {
                break;
            }
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        if basis.len() == cols {
            return Matrix::from_rows(&basis).expect("equal row lengths").transpose();
        }
    }
}

/// Generated rows plus ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub raw: Matrix,
    pub identity: Vec<usize>,
    pub modality: Vec<Modality>,
    /// Row `y` is the identity code `c_y`.
    pub codes: Matrix,
    pub maps: ModalityMaps,
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    let maps = ModalityMaps::draw(spec)?;
    generate_with_maps(spec, maps)
}

/// Rows are ordered by identity, NIR samples before VIS samples.
pub fn generate_with_maps(spec: &SynthSpec, maps: ModalityMaps) -> Result<Dataset> {
    spec.validate()?;
    if maps.map_nir.shape() != (spec.raw_dim, spec.identity_dim)
        || maps.map_vis.shape() != (spec.raw_dim, spec.identity_dim)
        || maps.offset_nir.len() != spec.raw_dim
        || maps.offset_vis.len() != spec.raw_dim
    {
        return Err(DvrError::invalid("modality maps do not match the synthetic spec"));
    }
    let per_id = 2 * spec.samples_per_identity;
    let total = spec.num_identities * per_id;
    let mut raw = Matrix::zeros(total, spec.raw_dim);
    let mut identity = Vec::with_capacity(total);
    let mut modality = Vec::with_capacity(total);
    let mut codes = Matrix::zeros(spec.num_identities, spec.identity_dim);
    let mut row = 0;
    for y in 0..spec.num_identities {
        let mut rng = Rng::substream(spec.seed, 1 + y as u64);
        let code: Vec<f64> = (0..spec.identity_dim).map(|_| rng.normal()).collect();
        codes.row_mut(y).copy_from_slice(&code);
        for m in [Modality::Nir, Modality::Vis] {
            let (map, offset) = maps.for_modality(m);
            for _ in 0..spec.samples_per_identity {
                let latent: Vec<f64> = code.iter().map(|c| c + spec.identity_noise * rng.normal()).collect();
                let out = raw.row_mut(row);
                for (r, o) in out.iter_mut().enumerate() {
                    *o = dot(map.row(r), &latent) + offset[r] + spec.observation_noise * rng.normal();
                }
                identity.push(y);
                modality.push(m);
                row += 1;
            }
        }
    }
    Ok(Dataset {
        raw,
        identity,
        modality,
        codes,
        maps,
    })
}

/// Identity-disjoint train/test protocol.
///
/// Train labels are class indices into `train_identities`; gallery and probe
/// labels are the original identity ids.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub train: LabeledBatch,
    pub train_identities: Vec<usize>,
    /// First VIS sample of each test identity.
    pub gallery: LabeledBatch,
    /// Every NIR sample of the test identities.
    pub probe: LabeledBatch,
}

impl ProtocolSplit {
    pub fn num_classes(&self) -> usize {
        self.train_identities.len()
    }

    pub fn test_identities(&self) -> Vec<usize> {
        self.gallery.labels.clone()
    }
}

pub fn split(dataset: &Dataset, train_fraction: f64, rng: &mut Rng) -> Result<ProtocolSplit> {
    let mut ids: Vec<usize> = dataset.identity.clone();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(DvrError::invalid(format!(
            "split needs at least 2 identities, got {}",
            ids.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DvrError::invalid("train_fraction must lie in (0, 1)"));
    }
    rng.shuffle(&mut ids);
    let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut train_ids = ids[..n_train].to_vec();
    let mut test_ids = ids[n_train..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();

    let class_of = |id: usize| train_ids.binary_search(&id).ok();
    let train_rows: Vec<usize> = (0..dataset.identity.len())
        .filter(|&r| class_of(dataset.identity[r]).is_some())
        .collect();
    let train = LabeledBatch::new(
        dataset.raw.select_rows(&train_rows),
        train_rows.iter().map(|&r| dataset.modality[r]).collect(),
        train_rows
            .iter()
            .map(|&r| class_of(dataset.identity[r]).expect("filtered"))
            .collect(),
    )?;

    let mut gallery_rows = Vec::with_capacity(test_ids.len());
    for &id in &test_ids {
        let first_vis = (0..dataset.identity.len())
            .find(|&r| dataset.identity[r] == id && dataset.modality[r] == Modality::Vis)
            .ok_or_else(|| DvrError::invalid(format!("identity {id} has no VIS sample")))?;
        gallery_rows.push(first_vis);
    }
    let probe_rows: Vec<usize> = (0..dataset.identity.len())
        .filter(|&r| dataset.modality[r] == Modality::Nir && test_ids.binary_search(&dataset.identity[r]).is_ok())
        .collect();
    let batch = |rows: &[usize]| {
        LabeledBatch::new(
            dataset.raw.select_rows(rows),
            rows.iter().map(|&r| dataset.modality[r]).collect(),
            rows.iter().map(|&r| dataset.identity[r]).collect(),
        )
    };
    Ok(ProtocolSplit {
        train,
        train_identities: train_ids,
        gallery: batch(&gallery_rows)?,
        probe: batch(&probe_rows)?,
    })
}

/// Generate from `spec` and split with a generator seeded from `spec.seed`.
pub fn generate_split(spec: &SynthSpec) -> Result<ProtocolSplit> {
    let data = generate(spec)?;
    let mut rng = Rng::substream(spec.seed, u64::MAX);
    split(&data, spec.train_fraction, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_identities: 10,
            samples_per_identity: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = SynthSpec { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap().raw, generate(&other).unwrap().raw);
    }

    #[test]
    fn noiseless_samples_collapse() {
        let spec = SynthSpec {
            identity_noise: 0.0,
            observation_noise: 0.0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        // rows 0..3 are identity 0 NIR
        assert_eq!(d.raw.row(0), d.raw.row(1));
        assert_eq!(d.raw.row(1), d.raw.row(2));
        assert_ne!(d.raw.row(0), d.raw.row(3));
    }

    #[test]
    fn maps_have_orthonormal_columns() {
        let maps = ModalityMaps::draw(&SynthSpec::default()).unwrap();
        for a in [&maps.map_nir, &maps.map_vis] {
            let gram = a.t_matmul(a).unwrap();
            let err = gram.sub(&Matrix::identity(8)).unwrap().frobenius_sq();
            assert!(err < 1e-24, "{err}");
        }
    }

    #[test]
    fn shared_maps_make_modalities_exchangeable() {
        let spec = small();
        let mut maps = ModalityMaps::draw(&spec).unwrap();
        maps.map_vis = maps.map_nir.clone();
        maps.offset_vis = maps.offset_nir.clone();
        let noiseless = SynthSpec {
            identity_noise: 0.0,
            observation_noise: 0.0,
            ..spec
        };
        let d = generate_with_maps(&noiseless, maps).unwrap();
        // NIR block and VIS block of each identity coincide.
        for y in 0..noiseless.num_identities {
            let base = y * 2 * noiseless.samples_per_identity;
            assert_eq!(d.raw.row(base), d.raw.row(base + noiseless.samples_per_identity));
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let d = generate(&small()).unwrap();
        let s = split(&d, 0.5, &mut Rng::new(3)).unwrap();
        assert_eq!(s.train_identities.len(), 5);
        assert_eq!(s.gallery.len(), 5);
        let test = s.test_identities();
        assert!(s.train_identities.iter().all(|id| !test.contains(id)));
        assert!(s.probe.modality.iter().all(|&m| m == Modality::Nir));
        assert!(s.gallery.modality.iter().all(|&m| m == Modality::Vis));
        assert_eq!(s.probe.len(), 5 * 3);
        assert_eq!(s.train.len(), 5 * 3 * 2);
        assert!(s.train.labels.iter().all(|&l| l < 5));
    }

    #[test]
    fn split_rejects_single_identity() {
        let spec = SynthSpec {
            num_identities: 1,
            ..small()
        };
        let d = generate(&spec).unwrap();
        assert!(split(&d, 0.5, &mut Rng::new(0)).is_err());
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn within_modality_nearest_centroid_is_perfect() {
        let spec = SynthSpec {
            observation_noise: 0.0,
            ..SynthSpec::default()
        };
        let d = generate(&spec).unwrap();
        let n = spec.samples_per_identity;
        for m in [Modality::Nir, Modality::Vis] {
            let off = if m == Modality::Nir { 0 } else { n };
            let centroids: Vec<Vec<f64>> = (0..spec.num_identities)
                .map(|y| {
                    let mut c = vec![0.0; spec.raw_dim];
                    for s in 0..n {
                        let row = d.raw.row(y * 2 * n + off + s);
                        c.iter_mut().zip(row).for_each(|(a, b)| *a += b / n as f64);
                    }
                    c
                })
                .collect();
            for r in 0..d.raw.rows() {
                if d.modality[r] != m {
                    continue;
                }
                let dist = |c: &Vec<f64>| c.iter().zip(d.raw.row(r)).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..centroids.len())
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                assert_eq!(best, d.identity[r]);
            }
        }
    }

    /// Rank-1 of NIR samples against one reference sample per identity.
    fn raw_rank1(d: &Dataset, spec: &SynthSpec, reference: Modality) -> f64 {
        let n = spec.samples_per_identity;
        let ref_off = if reference == Modality::Nir { n - 1 } else { n };
        let refs: Vec<&[f64]> = (0..spec.num_identities).map(|y| d.raw.row(y * 2 * n + ref_off)).collect();
        let mut hits = 0;
        let mut total = 0;
        for y in 0..spec.num_identities {
            for s in 0..n - 1 {
                let q = d.raw.row(y * 2 * n + s);
                let best = (0..refs.len())
                    .max_by(|&a, &b| cosine(q, refs[a]).total_cmp(&cosine(q, refs[b])))
                    .unwrap();
                hits += usize::from(best == y);
                total += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn cross_modal_matching_is_harder_in_raw_space() {
        let mut gaps = Vec::new();
        for seed in 0..5 {
            let spec = SynthSpec {
                seed,
                ..SynthSpec::default()
            };
            let d = generate(&spec).unwrap();
            gaps.push(raw_rank1(&d, &spec, Modality::Nir) - raw_rank1(&d, &spec, Modality::Vis));
        }
        gaps.sort_by(f64::total_cmp);
        assert!(gaps[2] > 0.0, "median gap {}", gaps[2]);
    }
}
