//! Disentangled variational representation over paired NIR/VIS features.
//!
//! Each modality has its own posterior estimator producing `(μ, log σ²)`
//! for an `h`-dimensional latent code; one shared decoder maps a sampled
//! code back to the `d`-dimensional feature space. The training objective
//! (minimized) is
//!
//! ```text
//! KL_N + KL_V + ‖x_N − x̂_N‖² + ‖x_V − x̂_V‖² + CE(W x̂_N, y) + CE(W x̂_V, y)
//!   + λ1 ‖μ_N − μ_V‖² + λ2 ‖σ_V − P σ_N‖² + λ3 ‖PᵀP − I‖²_F
//! ```
//!
//! with every per-sample term averaged over the batch. Gradients are
//! computed by hand and checked against central differences in tests.

use crate::error::{DvrError, Result};
use crate::mlp::{mlp_backward, mlp_forward, mlp_init, MlpGrads, MlpParams, MlpSpec, MlpTape};
use crate::numerics::{Matrix, Rng};
use crate::recognition::{softmax_xent, Classifier, Modality};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 30.0;

/// Hidden layers in each encoder trunk and in the decoder.
pub const TRUNK_DEPTH: usize = 4;

/// Trade-off weights for the mean-discrepancy, alignment and orthogonality terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lambdas {
    pub mean_disc: f64,
    pub corr_align: f64,
    pub ortho: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            mean_disc: 1.0,
            corr_align: 0.1,
            ortho: 0.001,
        }
    }
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        mean_disc: 0.0,
        corr_align: 0.0,
        ortho: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.mean_disc, self.corr_align, self.ortho]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(DvrError::invalid("lambdas must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-term multipliers applied inside [`dvr_loss_with_noise`].
///
/// The objective uses [`TermWeights::from_lambdas`]; gradient checks switch
/// terms on one at a time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub kl_nir: f64,
    pub kl_vis: f64,
    pub recon_l2: f64,
    pub recon_ce: f64,
    pub mean_disc: f64,
    pub corr_align: f64,
    pub ortho: f64,
}

impl TermWeights {
    pub fn from_lambdas(l: Lambdas) -> Self {
        TermWeights {
            kl_nir: 1.0,
            kl_vis: 1.0,
            recon_l2: 1.0,
            recon_ce: 1.0,
            mean_disc: l.mean_disc,
            corr_align: l.corr_align,
            ortho: l.ortho,
        }
    }

    pub const NONE: TermWeights = TermWeights {
        kl_nir: 0.0,
        kl_vis: 0.0,
        recon_l2: 0.0,
        recon_ce: 0.0,
        mean_disc: 0.0,
        corr_align: 0.0,
        ortho: 0.0,
    };
}

/// A batch of diagonal Gaussians, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Matrix,
    pub log_var: Matrix,
}

impl GaussianPosterior {
    pub fn new(mu: Matrix, log_var: Matrix) -> Result<Self> {
        mu.check_same_shape(&log_var)?;
        Ok(GaussianPosterior { mu, log_var })
    }

    pub fn sigma(&self) -> Matrix {
        self.log_var.map(|v| (0.5 * v).exp())
    }

    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }
}

/// Layer layout of the encoders and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DvrDims {
    pub feature_dim: usize,
    pub latent_dim: usize,
}

impl DvrDims {
    /// `d → h (×4, leaky) → 2h (linear)`; the output splits into μ and log σ².
    pub fn encoder_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.feature_dim];
        widths.extend(std::iter::repeat_n(self.latent_dim, TRUNK_DEPTH));
        widths.push(2 * self.latent_dim);
        MlpSpec::leaky_hidden(widths)
    }

    /// `h → h (×4, leaky) → d (linear)`.
    pub fn decoder_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.latent_dim];
        widths.extend(std::iter::repeat_n(self.latent_dim, TRUNK_DEPTH));
        widths.push(self.feature_dim);
        MlpSpec::leaky_hidden(widths)
    }
}

/// Posterior estimators `φ_N`, `φ_V`, the shared decoder and the alignment matrix `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct DvrParams {
    pub encoder_nir: MlpParams,
    pub encoder_vis: MlpParams,
    pub decoder: MlpParams,
    pub align: Matrix,
}

/// Gradients share the parameter layout.
pub type DvrGrads = DvrParams;

impl DvrParams {
    /// Gaussian-initialized networks and `P = I`.
    pub fn init(dims: DvrDims, rng: &mut Rng, scale: f64) -> Result<Self> {
        let enc = dims.encoder_spec()?;
        let dec = dims.decoder_spec()?;
        Ok(DvrParams {
            encoder_nir: mlp_init(&enc, rng, scale)?,
            encoder_vis: mlp_init(&enc, rng, scale)?,
            decoder: mlp_init(&dec, rng, scale)?,
            align: Matrix::identity(dims.latent_dim),
        })
    }

    pub fn zeros(dims: DvrDims) -> Result<Self> {
        Ok(DvrParams {
            encoder_nir: MlpParams::zeros(&dims.encoder_spec()?),
            encoder_vis: MlpParams::zeros(&dims.encoder_spec()?),
            decoder: MlpParams::zeros(&dims.decoder_spec()?),
            align: Matrix::zeros(dims.latent_dim, dims.latent_dim),
        })
    }

    pub fn dims(&self) -> DvrDims {
        DvrDims {
            feature_dim: self.encoder_nir.input_width(),
            latent_dim: self.align.rows(),
        }
    }

    pub fn encoder(&self, modality: Modality) -> &MlpParams {
        match modality {
            Modality::Nir => &self.encoder_nir,
            Modality::Vis => &self.encoder_vis,
        }
    }

    pub fn check(&self) -> Result<()> {
        let dims = self.dims();
        let enc = dims.encoder_spec()?;
        let dec = dims.decoder_spec()?;
        let shapes_ok = |p: &MlpParams, s: &MlpSpec| {
            p.layers.len() == s.num_layers()
                && p.layers
                    .iter()
                    .zip(s.widths.windows(2))
                    .all(|(l, w)| l.weight.shape() == (w[0], w[1]))
        };
        if self.align.rows() != self.align.cols()
            || !shapes_ok(&self.encoder_nir, &enc)
            || !shapes_ok(&self.encoder_vis, &enc)
            || !shapes_ok(&self.decoder, &dec)
        {
            return Err(DvrError::invalid("DVR parameter shapes are inconsistent"));
        }
        Ok(())
    }

    /// Encoder and decoder blocks, the set updated in the posterior phase.
    pub fn network_blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder_nir.blocks();
        b.extend(self.encoder_vis.blocks());
        b.extend(self.decoder.blocks());
        b
    }

    pub fn network_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.encoder_nir.blocks_mut();
        b.extend(self.encoder_vis.blocks_mut());
        b.extend(self.decoder.blocks_mut());
        b
    }

    pub fn network_block_lens(&self) -> Vec<usize> {
        self.network_blocks().iter().map(|b| b.len()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.network_blocks().concat();
        v.extend_from_slice(self.align.data());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in self.network_blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        let n = self.align.data().len();
        self.align.data_mut().copy_from_slice(&flat[off..off + n]);
        assert_eq!(off + n, flat.len());
    }

    /// Named flat ranges, in [`DvrParams::to_flat`] order.
    pub fn block_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let sizes = [
            ("encoder_nir", self.encoder_nir.num_scalars()),
            ("encoder_vis", self.encoder_vis.num_scalars()),
            ("decoder", self.decoder.num_scalars()),
            ("align", self.align.data().len()),
        ];
        let mut off = 0;
        sizes
            .iter()
            .map(|&(name, n)| {
                let r = off..off + n;
                off += n;
                (name, r)
            })
            .collect()
    }
}

/// Values of every objective term, each before its λ weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DvrLossBreakdown {
    pub kl_nir: f64,
    pub kl_vis: f64,
    pub recon_l2: f64,
    pub recon_ce: f64,
    pub mean_disc: f64,
    pub corr_align: f64,
    pub ortho: f64,
    pub total: f64,
}

impl DvrLossBreakdown {
    pub fn weighted_total(&self, w: &TermWeights) -> f64 {
        w.kl_nir * self.kl_nir
            + w.kl_vis * self.kl_vis
            + w.recon_l2 * self.recon_l2
            + w.recon_ce * self.recon_ce
            + w.mean_disc * self.mean_disc
            + w.corr_align * self.corr_align
            + w.ortho * self.ortho
    }

    /// `kl_N + kl_V + recon_l2 + recon_ce`.
    pub fn vae_part(&self) -> f64 {
        self.kl_nir + self.kl_vis + self.recon_l2 + self.recon_ce
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("kl_nir", self.kl_nir),
            ("kl_vis", self.kl_vis),
            ("recon_l2", self.recon_l2),
            ("recon_ce", self.recon_ce),
            ("mean_disc", self.mean_disc),
            ("corr_align", self.corr_align),
            ("ortho", self.ortho),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

struct EncodeTrace {
    post: GaussianPosterior,
    raw_log_var: Matrix,
    tape: MlpTape,
}

fn encode_traced(encoder: &MlpParams, x: &Matrix) -> Result<EncodeTrace> {
    let h = encoder.output_width() / 2;
    let dims = DvrDims {
        feature_dim: encoder.input_width(),
        latent_dim: h,
    };
    let spec = dims.encoder_spec()?;
    if x.cols() != dims.feature_dim {
        return Err(DvrError::invalid(format!(
            "encoder input has {} columns, expected {}",
            x.cols(),
            dims.feature_dim
        )));
    }
    let (out, tape) = mlp_forward(encoder, &spec, x)?;
    let mu = out.slice_cols(0, h);
    let raw_log_var = out.slice_cols(h, 2 * h);
    let log_var = raw_log_var.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    Ok(EncodeTrace {
        post: GaussianPosterior { mu, log_var },
        raw_log_var,
        tape,
    })
}

/// Posterior `q(z|x) = N(μ, diag σ²)` for every row of `x`.
pub fn encode(encoder: &MlpParams, x: &Matrix) -> Result<GaussianPosterior> {
    Ok(encode_traced(encoder, x)?.post)
}

/// `z = μ + ε ⊙ exp(½ log σ²)`.
pub fn reparameterize(post: &GaussianPosterior, eps: &Matrix) -> Result<Matrix> {
    post.mu.check_same_shape(eps)?;
    let sigma = post.sigma();
    let noise = eps.zip_map(&sigma, |e, s| e * s)?;
    post.mu.add(&noise)
}

/// Mean over rows of `½ Σ_j (μ_j² + σ_j² − 1 − log σ_j²)`.
pub fn kl_to_std_normal(post: &GaussianPosterior) -> f64 {
    let n = post.rows().max(1) as f64;
    post.mu
        .data()
        .iter()
        .zip(post.log_var.data())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum::<f64>()
        / n
}

pub fn decode(decoder: &MlpParams, z: &Matrix) -> Result<Matrix> {
    let spec = decoder_spec_of(decoder)?;
    if z.cols() != spec.input_width() {
        return Err(DvrError::invalid(format!(
            "decoder input has {} columns, expected {}",
            z.cols(),
            spec.input_width()
        )));
    }
    Ok(mlp_forward(decoder, &spec, z)?.0)
}

fn decoder_spec_of(decoder: &MlpParams) -> Result<MlpSpec> {
    DvrDims {
        feature_dim: decoder.output_width(),
        latent_dim: decoder.input_width(),
    }
    .decoder_spec()
}

/// Mean over rows of `‖x − x̂‖²`.
pub fn recon_l2(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let n = x.rows().max(1) as f64;
    Ok(x.data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean over identity-paired rows of `‖μ_N − μ_V‖²`.
pub fn mean_discrepancy(mu_nir: &Matrix, mu_vis: &Matrix) -> Result<f64> {
    if mu_nir.rows() != mu_vis.rows() {
        return Err(DvrError::invalid(format!(
            "mean discrepancy over {} and {} rows",
            mu_nir.rows(),
            mu_vis.rows()
        )));
    }
    recon_l2(mu_nir, mu_vis)
}

fn align_residual(sigma_nir: &Matrix, sigma_vis: &Matrix, align: &Matrix) -> Result<Matrix> {
    sigma_nir.check_same_shape(sigma_vis)?;
    if align.shape() != (sigma_nir.cols(), sigma_nir.cols()) {
        return Err(DvrError::invalid(format!(
            "alignment matrix {}x{} for latent dim {}",
            align.rows(),
            align.cols(),
            sigma_nir.cols()
        )));
    }
    // Row form of σ_V − P σ_N.
    sigma_vis.sub(&sigma_nir.matmul_t(align)?)
}

/// Mean over paired rows of `‖σ_V − P σ_N‖²`.
pub fn corr_align(sigma_nir: &Matrix, sigma_vis: &Matrix, align: &Matrix) -> Result<f64> {
    let r = align_residual(sigma_nir, sigma_vis, align)?;
    Ok(r.frobenius_sq() / sigma_nir.rows().max(1) as f64)
}

/// `‖PᵀP − I‖²_F`.
pub fn ortho_penalty(align: &Matrix) -> Result<f64> {
    Ok(ortho_residual(align)?.frobenius_sq())
}

fn ortho_residual(align: &Matrix) -> Result<Matrix> {
    if align.rows() != align.cols() {
        return Err(DvrError::invalid("alignment matrix must be square"));
    }
    align.t_matmul(align)?.sub(&Matrix::identity(align.rows()))
}

/// Value and `P`-gradient of `λ2 · corr_align + λ3 · ortho` at fixed σ.
pub fn align_objective(
    sigma_nir: &Matrix,
    sigma_vis: &Matrix,
    align: &Matrix,
    lambdas: Lambdas,
) -> Result<(f64, Matrix)> {
    let r = align_residual(sigma_nir, sigma_vis, align)?;
    let m = ortho_residual(align)?;
    let n = sigma_nir.rows().max(1) as f64;
    let value = lambdas.corr_align * r.frobenius_sq() / n + lambdas.ortho * m.frobenius_sq();
    let grad = r
        .t_matmul(sigma_nir)?
        .scale(-2.0 * lambdas.corr_align / n)
        .add(&align.matmul(&m)?.scale(4.0 * lambdas.ortho))?;
    Ok((value, grad))
}

/// Squared 2-Wasserstein distance between `N(m1, diag s1²)` and `N(m2, diag s2²)`.
///
/// For commuting covariances the Bures term reduces to `Σ (s1_j − s2_j)²`.
pub fn wasserstein2_diag(m1: &[f64], s1: &[f64], m2: &[f64], s2: &[f64]) -> Result<f64> {
    let n = m1.len();
    if s1.len() != n || m2.len() != n || s2.len() != n {
        return Err(DvrError::invalid("wasserstein2_diag: dimension mismatch"));
    }
    if s1.iter().chain(s2).any(|&s| !(s > 0.0)) {
        return Err(DvrError::invalid("wasserstein2_diag: standard deviations must be > 0"));
    }
    let means: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b) * (a - b)).sum();
    let bures: f64 = s1.iter().zip(s2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(means + bures)
}

/// Standard-normal noise for both modalities of a batch, drawn NIR first.
pub fn draw_noise(rng: &mut Rng, rows: usize, latent_dim: usize) -> (Matrix, Matrix) {
    let eps_nir = rng.normal_matrix(rows, latent_dim, 1.0);
    let eps_vis = rng.normal_matrix(rows, latent_dim, 1.0);
    (eps_nir, eps_vis)
}

/// Encode, sample with fresh noise, decode, per modality.
pub fn generate_pair(dvr: &DvrParams, x_nir: &Matrix, x_vis: &Matrix, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    let (eps_nir, eps_vis) = draw_noise(rng, x_nir.rows(), dvr.dims().latent_dim);
    generate_pair_with_noise(dvr, x_nir, x_vis, &eps_nir, &eps_vis)
}

pub fn generate_pair_with_noise(
    dvr: &DvrParams,
    x_nir: &Matrix,
    x_vis: &Matrix,
    eps_nir: &Matrix,
    eps_vis: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let z_nir = reparameterize(&encode(&dvr.encoder_nir, x_nir)?, eps_nir)?;
    let z_vis = reparameterize(&encode(&dvr.encoder_vis, x_vis)?, eps_vis)?;
    Ok((decode(&dvr.decoder, &z_nir)?, decode(&dvr.decoder, &z_vis)?))
}

/// Objective and gradients for one paired batch, drawing `ε` from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn dvr_loss(
    dvr: &DvrParams,
    x_nir: &Matrix,
    x_vis: &Matrix,
    labels: &[usize],
    classifier: &Classifier,
    lambdas: Lambdas,
    rng: &mut Rng,
) -> Result<(DvrLossBreakdown, DvrGrads)> {
    lambdas.validate()?;
    let (eps_nir, eps_vis) = draw_noise(rng, x_nir.rows(), dvr.dims().latent_dim);
    dvr_loss_with_noise(
        dvr,
        x_nir,
        x_vis,
        labels,
        classifier,
        TermWeights::from_lambdas(lambdas),
        &eps_nir,
        &eps_vis,
    )
}

/// Objective and gradients with explicit noise and per-term weights.
///
/// `classifier` is read-only here; it receives no gradient.
#[allow(clippy::too_many_arguments)]
pub fn dvr_loss_with_noise(
    dvr: &DvrParams,
    x_nir: &Matrix,
    x_vis: &Matrix,
    labels: &[usize],
    classifier: &Classifier,
    weights: TermWeights,
    eps_nir: &Matrix,
    eps_vis: &Matrix,
) -> Result<(DvrLossBreakdown, DvrGrads)> {
    dvr.check()?;
    let dims = dvr.dims();
    let b = x_nir.rows();
    if x_vis.rows() != b || labels.len() != b {
        return Err(DvrError::invalid(format!(
            "misaligned batches: {} NIR rows, {} VIS rows, {} labels",
            b,
            x_vis.rows(),
            labels.len()
        )));
    }
    if b == 0 {
        return Err(DvrError::invalid("empty batch"));
    }
    let bn = b as f64;
    let enc_spec = dims.encoder_spec()?;
    let dec_spec = dims.decoder_spec()?;

    let nir = encode_traced(&dvr.encoder_nir, x_nir)?;
    let vis = encode_traced(&dvr.encoder_vis, x_vis)?;
    let sigma_nir = nir.post.sigma();
    let sigma_vis = vis.post.sigma();
    let z_nir = reparameterize(&nir.post, eps_nir)?;
    let z_vis = reparameterize(&vis.post, eps_vis)?;
    let (xh_nir, dec_tape_nir) = mlp_forward(&dvr.decoder, &dec_spec, &z_nir)?;
    let (xh_vis, dec_tape_vis) = mlp_forward(&dvr.decoder, &dec_spec, &z_vis)?;

    let ce_nir = softmax_xent(classifier, &xh_nir, labels)?;
    let ce_vis = softmax_xent(classifier, &xh_vis, labels)?;
    let residual = align_residual(&sigma_nir, &sigma_vis, &dvr.align)?;
    let ortho_m = ortho_residual(&dvr.align)?;

    let mut parts = DvrLossBreakdown {
        kl_nir: kl_to_std_normal(&nir.post),
        kl_vis: kl_to_std_normal(&vis.post),
        recon_l2: recon_l2(x_nir, &xh_nir)? + recon_l2(x_vis, &xh_vis)?,
        recon_ce: ce_nir.loss + ce_vis.loss,
        mean_disc: mean_discrepancy(&nir.post.mu, &vis.post.mu)?,
        corr_align: residual.frobenius_sq() / bn,
        ortho: ortho_m.frobenius_sq(),
        total: 0.0,
    };
    parts.total = parts.weighted_total(&weights);

    // Reconstruction terms → decoder → latent samples.
    let d_xhat = |x: &Matrix, xh: &Matrix, ce_grad: &Matrix| -> Result<Matrix> {
        let l2 = xh.sub(x)?.scale(2.0 * weights.recon_l2 / bn);
        l2.add(&ce_grad.scale(weights.recon_ce))
    };
    let g_xh_nir = d_xhat(x_nir, &xh_nir, &ce_nir.feature_grad)?;
    let g_xh_vis = d_xhat(x_vis, &xh_vis, &ce_vis.feature_grad)?;
    let (mut dec_grad, g_z_nir) = mlp_backward(&dvr.decoder, &dec_spec, &dec_tape_nir, &g_xh_nir)?;
    let (dec_grad_vis, g_z_vis) = mlp_backward(&dvr.decoder, &dec_spec, &dec_tape_vis, &g_xh_vis)?;
    for (a, g) in dec_grad.blocks_mut().into_iter().zip(dec_grad_vis.blocks()) {
        a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
    }

    // Sample path: ∂z/∂μ = I, ∂z/∂σ = ε.
    let mu_diff = nir.post.mu.sub(&vis.post.mu)?;
    let md = 2.0 * weights.mean_disc / bn;
    let d_mu_nir = g_z_nir.add(&mu_diff.scale(md))?;
    let d_mu_vis = g_z_vis.sub(&mu_diff.scale(md))?;
    let ca = 2.0 * weights.corr_align / bn;
    let d_sigma_nir = g_z_nir
        .zip_map(eps_nir, |g, e| g * e)?
        .sub(&residual.matmul(&dvr.align)?.scale(ca))?;
    let d_sigma_vis = g_z_vis.zip_map(eps_vis, |g, e| g * e)?.add(&residual.scale(ca))?;

    let branch = |trace: &EncodeTrace,
                  encoder: &MlpParams,
                  d_mu: &Matrix,
                  d_sigma: &Matrix,
                  kl_w: f64|
     -> Result<MlpGrads> {
        let h = dims.latent_dim;
        let mut upstream = Matrix::zeros(b, 2 * h);
        for r in 0..b {
            for j in 0..h {
                let mu = trace.post.mu.get(r, j);
                let lv = trace.post.log_var.get(r, j);
                let raw = trace.raw_log_var.get(r, j);
                let sigma = (0.5 * lv).exp();
                upstream.set(r, j, d_mu.get(r, j) + kl_w * mu / bn);
                let d_lv = d_sigma.get(r, j) * 0.5 * sigma + kl_w * 0.5 * (lv.exp() - 1.0) / bn;
                let inside = (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&raw);
                upstream.set(r, h + j, if inside { d_lv } else { 0.0 });
            }
        }
        Ok(mlp_backward(encoder, &enc_spec, &trace.tape, &upstream)?.0)
    };
    let g_nir = branch(&nir, &dvr.encoder_nir, &d_mu_nir, &d_sigma_nir, weights.kl_nir)?;
    let g_vis = branch(&vis, &dvr.encoder_vis, &d_mu_vis, &d_sigma_vis, weights.kl_vis)?;

    let align_grad = residual
        .t_matmul(&sigma_nir)?
        .scale(-ca)
        .add(&dvr.align.matmul(&ortho_m)?.scale(4.0 * weights.ortho))?;

    if let Some(term) = parts.first_non_finite() {
        return Err(DvrError::numeric("posterior", term));
    }
    Ok((
        parts,
        DvrParams {
            encoder_nir: g_nir,
            encoder_vis: g_vis,
            decoder: dec_grad,
            align: align_grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn tiny_instance(seed: u64) -> (DvrParams, Matrix, Matrix, Vec<usize>, Classifier, Matrix, Matrix) {
        let mut rng = Rng::new(seed);
        let dims = DvrDims {
            feature_dim: 6,
            latent_dim: 3,
        };
        let mut dvr = DvrParams::init(dims, &mut rng, 1.0).unwrap();
        for p in [&mut dvr.encoder_nir, &mut dvr.encoder_vis, &mut dvr.decoder] {
            for l in &mut p.layers {
                l.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
            }
        }
        dvr.align = Matrix::identity(3).add(&rng.normal_matrix(3, 3, 0.3)).unwrap();
        let x_nir = rng.normal_matrix(4, 6, 1.0);
        let x_vis = rng.normal_matrix(4, 6, 1.0);
        let clf = Classifier::init(3, 6, &mut rng, 1.0);
        let (e1, e2) = draw_noise(&mut rng, 4, 3);
        (dvr, x_nir, x_vis, vec![0, 2, 1, 2], clf, e1, e2)
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let dims = DvrDims {
            feature_dim: 5,
            latent_dim: 2,
        };
        let enc = MlpParams::zeros(&dims.encoder_spec().unwrap());
        let post = encode(&enc, &Matrix::from_vec(1, 5, vec![1.0; 5]).unwrap()).unwrap();
        assert_eq!(post.mu.data(), &[0.0, 0.0]);
        assert_eq!(post.log_var.data(), &[0.0, 0.0]);
        assert_eq!(kl_to_std_normal(&post), 0.0);
    }

    #[test]
    fn encode_is_row_separable_and_clamped() {
        let mut rng = Rng::new(1);
        let dims = DvrDims {
            feature_dim: 4,
            latent_dim: 2,
        };
        let mut enc = mlp_init(&dims.encoder_spec().unwrap(), &mut rng, 1.0).unwrap();
        let x = rng.normal_matrix(2, 4, 1.0);
        let both = encode(&enc, &x).unwrap();
        for r in 0..2 {
            let one = encode(&enc, &x.select_rows(&[r])).unwrap();
            assert_eq!(one.mu.row(0), both.mu.row(r));
            assert_eq!(one.log_var.row(0), both.log_var.row(r));
        }
        assert!(encode(&enc, &Matrix::zeros(1, 3)).is_err());
        // Huge output bias on the log-variance head saturates at the clamp.
        let last = enc.layers.last_mut().unwrap();
        last.bias[2] = 1e3;
        last.bias[3] = -1e3;
        let post = encode(&enc, &x).unwrap();
        assert!(post.log_var.data().chunks(2).all(|r| r == [LOG_VAR_MAX, LOG_VAR_MIN]));
    }

    #[test]
    fn reparameterize_cases() {
        let post = GaussianPosterior::new(m(&[&[1.0, -2.0]]), m(&[&[0.5, -1.0]])).unwrap();
        assert_eq!(reparameterize(&post, &Matrix::zeros(1, 2)).unwrap(), post.mu);
        let std = GaussianPosterior::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2)).unwrap();
        let e = m(&[&[0.3, -0.7]]);
        assert_eq!(reparameterize(&std, &e).unwrap(), e);
        assert!(reparameterize(&post, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn reparameterized_samples_have_posterior_variance() {
        let n = 100_000;
        let log_var = [0.4, -1.2, 1.5];
        let post = GaussianPosterior::new(
            Matrix::from_vec(n, 3, [0.5, -1.0, 2.0].repeat(n)).unwrap(),
            Matrix::from_vec(n, 3, log_var.repeat(n)).unwrap(),
        )
        .unwrap();
        let eps = Rng::new(31).normal_matrix(n, 3, 1.0);
        let z = reparameterize(&post, &eps).unwrap();
        for (j, lv) in log_var.iter().enumerate() {
            let col: Vec<f64> = (0..n).map(|r| z.get(r, j)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / lv.exp() - 1.0).abs() < 0.02, "coord {j}: {var} vs {}", lv.exp());
        }
    }

    #[test]
    fn reparameterize_jacobian_wrt_mu_is_identity() {
        let post = GaussianPosterior::new(m(&[&[0.2, 0.1]]), m(&[&[0.3, -0.4]])).unwrap();
        let eps = m(&[&[0.9, -1.1]]);
        for j in 0..2 {
            let num = finite_diff_grad(
                |mu| {
                    let p = GaussianPosterior::new(Matrix::row_vector(mu.to_vec()), post.log_var.clone()).unwrap();
                    reparameterize(&p, &eps).unwrap().get(0, j)
                },
                post.mu.data(),
                1e-6,
            )
            .unwrap();
            for (k, v) in num.iter().enumerate() {
                let expected = if j == k { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-9);
            }
        }
    }

    /// Monte-Carlo estimate of `E_q[log q(z) − log p(z)]`.
    fn kl_monte_carlo(mu: &[f64], log_var: &[f64], n: usize, rng: &mut Rng) -> f64 {
        let mut acc = 0.0;
        for _ in 0..n {
            for (&m, &lv) in mu.iter().zip(log_var) {
                let s = (0.5 * lv).exp();
                let z = m + s * rng.normal();
                let log_q = -0.5 * ((z - m) / s).powi(2) - s.ln();
                let log_p = -0.5 * z * z;
                acc += log_q - log_p;
            }
        }
        acc / n as f64
    }

    #[test]
    fn kl_values() {
        let std = GaussianPosterior::new(Matrix::zeros(1, 2), Matrix::zeros(1, 2)).unwrap();
        assert_eq!(kl_to_std_normal(&std), 0.0);
        let shifted = GaussianPosterior::new(m(&[&[1.0, 0.0]]), Matrix::zeros(1, 2)).unwrap();
        let mc = kl_monte_carlo(&[1.0, 0.0], &[0.0, 0.0], 200_000, &mut Rng::new(4));
        assert!((mc - 0.5).abs() < 0.01, "monte carlo {mc}");
        assert_eq!(kl_to_std_normal(&shifted), 0.5);
        let general = GaussianPosterior::new(m(&[&[0.3, -0.8]]), m(&[&[0.7, -0.5]])).unwrap();
        let mc = kl_monte_carlo(&[0.3, -0.8], &[0.7, -0.5], 200_000, &mut Rng::new(5));
        assert!((kl_to_std_normal(&general) - mc).abs() < 0.01);
    }

    #[test]
    fn recon_and_discrepancy_values() {
        let a = m(&[&[1.0, 0.0]]);
        let b = m(&[&[0.0, 1.0]]);
        assert_eq!(recon_l2(&a, &a).unwrap(), 0.0);
        assert_eq!(recon_l2(&a, &b).unwrap(), 2.0);
        assert_eq!(recon_l2(&b, &a).unwrap(), recon_l2(&a, &b).unwrap());
        assert!(recon_l2(&a, &Matrix::zeros(1, 3)).is_err());

        let mn = m(&[&[3.0, 0.0]]);
        let mv = m(&[&[0.0, 4.0]]);
        assert_eq!(mean_discrepancy(&mn, &mn).unwrap(), 0.0);
        assert_eq!(mean_discrepancy(&mn, &mv).unwrap(), 25.0);
        assert_eq!(mean_discrepancy(&mn.scale(3.0), &mv.scale(3.0)).unwrap(), 9.0 * 25.0);
        assert!(mean_discrepancy(&mn, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn alignment_values() {
        let i2 = Matrix::identity(2);
        let s = m(&[&[1.0, 1.0]]);
        assert_eq!(corr_align(&s, &s, &i2).unwrap(), 0.0);
        assert_eq!(corr_align(&s, &m(&[&[2.0, 1.0]]), &i2).unwrap(), 1.0);
        assert!(corr_align(&s, &s, &Matrix::identity(3)).is_err());

        assert_eq!(ortho_penalty(&i2).unwrap(), 0.0);
        assert_eq!(ortho_penalty(&i2.scale(2.0)).unwrap(), 18.0);
        let t: f64 = 0.7;
        let rot = m(&[&[t.cos(), -t.sin()], &[t.sin(), t.cos()]]);
        assert!(ortho_penalty(&rot).unwrap() < 1e-30);
        assert!(ortho_penalty(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn wasserstein_values() {
        let w = wasserstein2_diag(&[1.0, 0.0], &[1.0, 1.0], &[0.0, 1.0], &[2.0, 1.0]).unwrap();
        assert_eq!(w, 3.0);
        let w_swapped = wasserstein2_diag(&[0.0, 1.0], &[2.0, 1.0], &[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(w, w_swapped);
        assert_eq!(wasserstein2_diag(&[0.5], &[0.3], &[0.5], &[0.3]).unwrap(), 0.0);
        assert_eq!(wasserstein2_diag(&[1.0, 2.0], &[0.4, 0.6], &[0.0, 0.0], &[0.4, 0.6]).unwrap(), 5.0);
        assert!(wasserstein2_diag(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
        assert!(wasserstein2_diag(&[0.0], &[1.0], &[0.0, 1.0], &[1.0]).is_err());
    }

    /// The full Bures formula on diagonal matrices agrees with the reduction.
    #[test]
    fn wasserstein_matches_matrix_bures_form() {
        let (m1, s1, m2, s2): ([f64; 2], [f64; 2], [f64; 2], [f64; 2]) = ([1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [2.0, 1.0]);
        // trace(C1 + C2 − 2 (C2^½ C1 C2^½)^½) with C = diag(s²).
        let bures: f64 = (0..2)
            .map(|j| {
                let (c1, c2) = (s1[j] * s1[j], s2[j] * s2[j]);
                c1 + c2 - 2.0 * (c2.sqrt() * c1 * c2.sqrt()).sqrt()
            })
            .sum();
        let means: f64 = (0..2).map(|j| (m1[j] - m2[j]) * (m1[j] - m2[j])).sum();
        assert!((means + bures - 3.0).abs() < 1e-12);
        assert_eq!(wasserstein2_diag(&m1, &s1, &m2, &s2).unwrap(), means + bures);
    }

    #[test]
    fn zero_networks_reduce_to_reconstruction_terms() {
        let dims = DvrDims {
            feature_dim: 4,
            latent_dim: 2,
        };
        let dvr = DvrParams {
            align: Matrix::identity(2),
            ..DvrParams::zeros(dims).unwrap()
        };
        let mut rng = Rng::new(2);
        let x_nir = rng.normal_matrix(3, 4, 1.0);
        let x_vis = rng.normal_matrix(3, 4, 1.0);
        let clf = Classifier::init(2, 4, &mut rng, 1.0);
        let labels = [0, 1, 1];
        let (parts, _) = dvr_loss(&dvr, &x_nir, &x_vis, &labels, &clf, Lambdas::ZERO, &mut rng).unwrap();
        assert_eq!(parts.kl_nir, 0.0);
        assert_eq!(parts.kl_vis, 0.0);
        let zeros = Matrix::zeros(3, 4);
        let l2 = recon_l2(&x_nir, &zeros).unwrap() + recon_l2(&x_vis, &zeros).unwrap();
        let ce = 2.0 * softmax_xent(&clf, &zeros, &labels).unwrap().loss;
        assert_eq!(parts.recon_l2, l2);
        assert_eq!(parts.recon_ce, ce);
        assert_eq!(parts.total, l2 + ce);
    }

    #[test]
    fn breakdown_total_is_recomputable_and_penalties_are_separable() {
        let (dvr, xn, xv, labels, clf, en, ev) = tiny_instance(3);
        let lambdas = Lambdas::default();
        let (full, _) =
            dvr_loss_with_noise(&dvr, &xn, &xv, &labels, &clf, TermWeights::from_lambdas(lambdas), &en, &ev).unwrap();
        let recomputed = full.kl_nir
            + full.kl_vis
            + full.recon_l2
            + full.recon_ce
            + lambdas.mean_disc * full.mean_disc
            + lambdas.corr_align * full.corr_align
            + lambdas.ortho * full.ortho;
        assert_eq!(full.total, recomputed);
        let (plain, _) =
            dvr_loss_with_noise(&dvr, &xn, &xv, &labels, &clf, TermWeights::from_lambdas(Lambdas::ZERO), &en, &ev)
                .unwrap();
        assert_eq!(plain.total, full.vae_part());
        assert_eq!(
            (plain.kl_nir, plain.kl_vis, plain.recon_l2, plain.recon_ce),
            (full.kl_nir, full.kl_vis, full.recon_l2, full.recon_ce)
        );
        assert!(full.kl_nir >= 0.0 && full.mean_disc >= 0.0 && full.corr_align >= 0.0 && full.ortho >= 0.0);
    }

    #[test]
    fn misaligned_batches_rejected() {
        let (dvr, xn, xv, labels, clf, _, _) = tiny_instance(4);
        let mut rng = Rng::new(0);
        let short = xv.select_rows(&[0, 1, 2]);
        assert!(dvr_loss(&dvr, &xn, &short, &labels, &clf, Lambdas::default(), &mut rng).is_err());
        assert!(dvr_loss(&dvr, &xn, &xv, &labels[..3], &clf, Lambdas::default(), &mut rng).is_err());
        let bad = Lambdas {
            mean_disc: -1.0,
            ..Lambdas::default()
        };
        assert!(dvr_loss(&dvr, &xn, &xv, &labels, &clf, bad, &mut rng).is_err());
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        for seed in [10, 11, 12] {
            let (dvr, xn, xv, labels, clf, en, ev) = tiny_instance(seed);
            let w = TermWeights::from_lambdas(Lambdas {
                mean_disc: 1.0,
                corr_align: 0.7,
                ortho: 0.3,
            });
            let (_, grads) = dvr_loss_with_noise(&dvr, &xn, &xv, &labels, &clf, w, &en, &ev).unwrap();
            let mut probe = dvr.clone();
            let num = finite_diff_grad(
                |f| {
                    probe.set_flat(f);
                    dvr_loss_with_noise(&probe, &xn, &xv, &labels, &clf, w, &en, &ev).unwrap().0.total
                },
                &dvr.to_flat(),
                1e-5,
            )
            .unwrap();
            let (err, idx) = max_relative_error(&grads.to_flat(), &num);
            assert!(err < 1e-5, "seed {seed}: rel err {err} at {idx}");
        }
    }

    #[test]
    fn align_objective_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let sn = rng.normal_matrix(4, 3, 1.0).map(f64::abs);
        let sv = rng.normal_matrix(4, 3, 1.0).map(f64::abs);
        let p = Matrix::identity(3).add(&rng.normal_matrix(3, 3, 0.2)).unwrap();
        let l = Lambdas::default();
        let (v, g) = align_objective(&sn, &sv, &p, l).unwrap();
        assert!((v - (0.1 * corr_align(&sn, &sv, &p).unwrap() + 0.001 * ortho_penalty(&p).unwrap())).abs() < 1e-15);
        let num = finite_diff_grad(
            |f| align_objective(&sn, &sv, &Matrix::from_vec(3, 3, f.to_vec()).unwrap(), l).unwrap().0,
            p.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(g.data(), &num).0 < 1e-6);
    }

    #[test]
    fn generate_pair_paths() {
        let (dvr, xn, xv, _, _, _, _) = tiny_instance(7);
        let zero = Matrix::zeros(4, 3);
        let (gn, gv) = generate_pair_with_noise(&dvr, &xn, &xv, &zero, &zero).unwrap();
        assert_eq!(gn, decode(&dvr.decoder, &encode(&dvr.encoder_nir, &xn).unwrap().mu).unwrap());
        assert_eq!(gv, decode(&dvr.decoder, &encode(&dvr.encoder_vis, &xv).unwrap().mu).unwrap());
        let a = generate_pair(&dvr, &xn, &xv, &mut Rng::new(1)).unwrap();
        let b = generate_pair(&dvr, &xn, &xv, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.cols(), 6);
        assert_eq!(a.1.cols(), 6);
    }

    #[test]
    fn zero_decoder_decodes_to_zero() {
        let dims = DvrDims {
            feature_dim: 5,
            latent_dim: 2,
        };
        let dec = MlpParams::zeros(&dims.decoder_spec().unwrap());
        let out = decode(&dec, &Matrix::from_vec(2, 2, vec![1.0, -1.0, 3.0, 0.5]).unwrap()).unwrap();
        assert_eq!(out, Matrix::zeros(2, 5));
        assert!(decode(&dec, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn decoder_l2_gradient_matches_finite_differences() {
        let (dvr, xn, _, _, _, _, _) = tiny_instance(8);
        let z = Rng::new(3).normal_matrix(4, 3, 1.0);
        let spec = dvr.dims().decoder_spec().unwrap();
        let (xh, tape) = mlp_forward(&dvr.decoder, &spec, &z).unwrap();
        let up = xh.sub(&xn).unwrap().scale(2.0);
        let (g, _) = mlp_backward(&dvr.decoder, &spec, &tape, &up).unwrap();
        let mut probe = dvr.decoder.clone();
        let num = finite_diff_grad(
            |f| {
                probe.set_flat(f);
                let xh = decode(&probe, &z).unwrap();
                xh.sub(&xn).unwrap().frobenius_sq()
            },
            &dvr.decoder.to_flat(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g.to_flat(), &num).0 < 1e-5);
    }
}
