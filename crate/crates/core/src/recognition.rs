//! Recognition network: feature extractor, softmax classifier, and the
//! classification loss over real plus generated features.

use crate::error::{DvrError, Result};
use crate::mlp::{mlp_backward, mlp_forward_train, mlp_init, MlpGrads, MlpParams, MlpSpec};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Nir,
    Vis,
}

impl Modality {
    pub fn code(self) -> f64 {
        match self {
            Modality::Nir => 0.0,
            Modality::Vis => 1.0,
        }
    }

    pub fn from_code(v: f64) -> Result<Self> {
        match v {
            0.0 => Ok(Modality::Nir),
            1.0 => Ok(Modality::Vis),
            other => Err(DvrError::invalid(format!("bad modality code {other}"))),
        }
    }
}

/// Linear softmax layer, `logits = x·Wᵀ + b` with `W` of shape `classes × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Classifier {
            weight: Matrix::zeros(num_classes, dim),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn init(num_classes: usize, dim: usize, rng: &mut Rng, scale: f64) -> Self {
        Classifier {
            weight: rng.normal_matrix(num_classes, dim, scale / (dim as f64).sqrt()),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut z = features.matmul_t(&self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        vec![self.weight.data(), &self.bias]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }

    fn zeros_like(&self) -> Self {
        Classifier::zeros(self.num_classes(), self.input_dim())
    }

    fn accumulate(&mut self, other: &Classifier) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }
}

/// Extractor `f(·; Θ)` plus classifier `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecogParams {
    pub extractor: MlpParams,
    pub classifier: Classifier,
}

pub type RecogGrads = RecogParams;

impl RecogParams {
    /// Leaky MLP `raw → hidden… → feature_dim` plus a linear classifier.
    pub fn init(
        raw_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        num_classes: usize,
        rng: &mut Rng,
        scale: f64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(DvrError::invalid("classifier needs at least one class"));
        }
        let mut widths = vec![raw_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let spec = MlpSpec::leaky_hidden(widths)?;
        Ok(RecogParams {
            extractor: mlp_init(&spec, rng, scale)?,
            classifier: Classifier::init(num_classes, feature_dim, rng, scale),
        })
    }

    /// The extractor uses leaky hidden layers and a linear output; its
    /// widths are read back from the parameter shapes.
    pub fn extractor_spec(&self, dropout: Option<f64>) -> Result<MlpSpec> {
        let mut widths = vec![self.extractor.input_width()];
        widths.extend(self.extractor.layers.iter().map(|l| l.weight.cols()));
        let spec = MlpSpec::leaky_hidden(widths)?;
        match dropout {
            Some(rate) if rate > 0.0 => spec.with_dropout(rate),
            _ => Ok(spec),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.output_width()
    }

    pub fn raw_dim(&self) -> usize {
        self.extractor.input_width()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.extractor.blocks();
        b.extend(self.classifier.blocks());
        b
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.extractor.blocks_mut();
        b.extend(self.classifier.blocks_mut());
        b
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

/// Rows of raw inputs standing in for images, tagged with modality and label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub raw: Matrix,
    pub modality: Vec<Modality>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(raw: Matrix, modality: Vec<Modality>, labels: Vec<usize>) -> Result<Self> {
        if modality.len() != raw.rows() || labels.len() != raw.rows() {
            return Err(DvrError::invalid(format!(
                "labeled batch with {} rows, {} modality tags, {} labels",
                raw.rows(),
                modality.len(),
                labels.len()
            )));
        }
        Ok(LabeledBatch {
            raw,
            modality,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch {
            raw: self.raw.select_rows(idx),
            modality: idx.iter().map(|&i| self.modality[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Features `f(raw; Θ)` with dropout off.
pub fn extract(params: &RecogParams, raw: &Matrix) -> Result<Matrix> {
    let spec = params.extractor_spec(None)?;
    Ok(mlp_forward_train(&params.extractor, &spec, raw, None)?.0)
}

pub struct XentOutput {
    pub loss: f64,
    pub classifier_grad: Classifier,
    pub feature_grad: Matrix,
}

/// Mean softmax cross-entropy, stabilized by subtracting the row maximum.
pub fn softmax_xent(classifier: &Classifier, features: &Matrix, labels: &[usize]) -> Result<XentOutput> {
    if features.rows() != labels.len() {
        return Err(DvrError::invalid(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.cols() != classifier.input_dim() {
        return Err(DvrError::invalid(format!(
            "features of width {} for a classifier over {}",
            features.cols(),
            classifier.input_dim()
        )));
    }
    let classes = classifier.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DvrError::invalid(format!("label {bad} outside [0, {classes})")));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(XentOutput {
            loss: 0.0,
            classifier_grad: classifier.zeros_like(),
            feature_grad: Matrix::zeros(0, features.cols()),
        });
    }
    let logits = classifier.logits(features)?;
    let mut dlogits = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[y];
        let g = dlogits.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = (row[c] - log_z).exp() / n as f64;
        }
        g[y] -= 1.0 / n as f64;
    }
    let classifier_grad = Classifier {
        weight: dlogits.t_matmul(features)?,
        bias: dlogits.sum_rows(),
    };
    let feature_grad = dlogits.matmul(&classifier.weight)?;
    Ok(XentOutput {
        loss: loss / n as f64,
        classifier_grad,
        feature_grad,
    })
}

/// Components of the real-plus-generated classification loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClsLoss {
    pub real: f64,
    pub generated: f64,
}

impl ClsLoss {
    pub fn total(&self) -> f64 {
        self.real + self.generated
    }
}

/// `xent(f(raw; Θ)) + xent(gen)` against shared labels.
///
/// Generated features are constants here: Θ receives gradient only through
/// the real branch, `W` through both. An empty `gen_features` drops the
/// second term.
pub fn cls_loss_with_generated(
    recog: &RecogParams,
    raw: &Matrix,
    gen_features: &Matrix,
    labels: &[usize],
) -> Result<(ClsLoss, RecogGrads)> {
    cls_loss_with_generated_train(recog, raw, gen_features, labels, None, None)
}

/// As [`cls_loss_with_generated`], with optional extractor dropout.
pub fn cls_loss_with_generated_train(
    recog: &RecogParams,
    raw: &Matrix,
    gen_features: &Matrix,
    labels: &[usize],
    dropout: Option<f64>,
    dropout_rng: Option<&mut Rng>,
) -> Result<(ClsLoss, RecogGrads)> {
    if gen_features.rows() != 0 && gen_features.rows() != labels.len() {
        return Err(DvrError::invalid(format!(
            "{} generated rows for {} labels",
            gen_features.rows(),
            labels.len()
        )));
    }
    let spec = recog.extractor_spec(dropout)?;
    let (features, tape) = mlp_forward_train(&recog.extractor, &spec, raw, dropout_rng)?;
    let real = softmax_xent(&recog.classifier, &features, labels)?;
    let (extractor_grad, _): (MlpGrads, Matrix) = mlp_backward(&recog.extractor, &spec, &tape, &real.feature_grad)?;
    let mut classifier_grad = real.classifier_grad;
    let mut generated = 0.0;
    if gen_features.rows() > 0 {
        let gen = softmax_xent(&recog.classifier, gen_features, labels)?;
        classifier_grad.accumulate(&gen.classifier_grad)?;
        generated = gen.loss;
    }
    Ok((
        ClsLoss {
            real: real.loss,
            generated,
        },
        RecogParams {
            extractor: extractor_grad,
            classifier: classifier_grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::mlp_init;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn tiny_recog(rng: &mut Rng, raw: usize, d: usize, classes: usize) -> RecogParams {
        let spec = MlpSpec::leaky_hidden(vec![raw, 5, d]).unwrap();
        let mut extractor = mlp_init(&spec, rng, 1.0).unwrap();
        for l in &mut extractor.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        }
        let mut classifier = Classifier::init(classes, d, rng, 1.0);
        classifier.bias.iter_mut().for_each(|b| *b = 0.1 * rng.normal());
        RecogParams {
            extractor,
            classifier,
        }
    }

    #[test]
    fn two_class_uniform_logits_give_ln2() {
        let clf = Classifier::zeros(2, 3);
        let out = softmax_xent(&clf, &Matrix::zeros(1, 3), &[1]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_margin_gives_vanishing_loss() {
        let clf = Classifier {
            weight: Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        let x = Matrix::from_vec(1, 1, vec![50.0]).unwrap();
        let out = softmax_xent(&clf, &x, &[0]).unwrap();
        assert!(out.loss < 1e-20, "{}", out.loss);
    }

    #[test]
    fn invalid_label_rejected() {
        let clf = Classifier::zeros(2, 3);
        assert!(softmax_xent(&clf, &Matrix::zeros(1, 3), &[2]).is_err());
        assert!(softmax_xent(&clf, &Matrix::zeros(2, 3), &[0]).is_err());
    }

    #[test]
    fn shift_invariance_of_logits() {
        let mut rng = Rng::new(3);
        let mut clf = Classifier::init(4, 3, &mut rng, 1.0);
        let x = rng.normal_matrix(5, 3, 1.0);
        let labels = [0, 1, 2, 3, 0];
        let a = softmax_xent(&clf, &x, &labels).unwrap().loss;
        clf.bias.iter_mut().for_each(|b| *b += 123.456);
        let b = softmax_xent(&clf, &x, &labels).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn xent_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        let clf = Classifier::init(3, 4, &mut rng, 1.0);
        let x = rng.normal_matrix(5, 4, 1.0);
        let labels = [0, 2, 1, 1, 0];
        let out = softmax_xent(&clf, &x, &labels).unwrap();

        let mut probe = clf.clone();
        let flat: Vec<f64> = clf.blocks().concat();
        let num = finite_diff_grad(
            |f| {
                let (w, b) = f.split_at(12);
                probe.weight.data_mut().copy_from_slice(w);
                probe.bias.copy_from_slice(b);
                softmax_xent(&probe, &x, &labels).unwrap().loss
            },
            &flat,
            1e-5,
        )
        .unwrap();
        let analytic: Vec<f64> = out.classifier_grad.blocks().concat();
        assert!(max_relative_error(&analytic, &num).0 < 1e-6);

        let num_x = finite_diff_grad(
            |f| softmax_xent(&clf, &Matrix::from_vec(5, 4, f.to_vec()).unwrap(), &labels).unwrap().loss,
            x.data(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(out.feature_grad.data(), &num_x).0 < 1e-6);
    }

    #[test]
    fn duplicated_generated_batch_doubles_loss() {
        let mut rng = Rng::new(9);
        let recog = tiny_recog(&mut rng, 4, 3, 3);
        let raw = rng.normal_matrix(4, 4, 1.0);
        let labels = [0, 1, 2, 1];
        let feats = extract(&recog, &raw).unwrap();
        let (single, _) = cls_loss_with_generated(&recog, &raw, &Matrix::zeros(0, 3), &labels).unwrap();
        let (both, _) = cls_loss_with_generated(&recog, &raw, &feats, &labels).unwrap();
        let direct = softmax_xent(&recog.classifier, &feats, &labels).unwrap().loss;
        assert_eq!(single.total(), direct);
        assert!((both.total() - 2.0 * direct).abs() < 1e-15);
    }

    #[test]
    fn zero_classifier_gives_two_ln_c() {
        let mut rng = Rng::new(10);
        let mut recog = tiny_recog(&mut rng, 4, 3, 5);
        recog.classifier = Classifier::zeros(5, 3);
        let raw = rng.normal_matrix(3, 4, 1.0);
        let gen = rng.normal_matrix(3, 3, 1.0);
        let (loss, _) = cls_loss_with_generated(&recog, &raw, &gen, &[0, 3, 4]).unwrap();
        assert!((loss.total() - 2.0 * 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn combined_loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(12);
        let recog = tiny_recog(&mut rng, 5, 4, 3);
        let raw = rng.normal_matrix(4, 5, 1.0);
        let gen = rng.normal_matrix(4, 4, 1.0);
        let labels = [2, 0, 1, 2];
        let (_, grads) = cls_loss_with_generated(&recog, &raw, &gen, &labels).unwrap();
        let mut probe = recog.clone();
        let num = finite_diff_grad(
            |f| {
                probe.set_flat(f);
                cls_loss_with_generated(&probe, &raw, &gen, &labels).unwrap().0.total()
            },
            &recog.to_flat(),
            1e-5,
        )
        .unwrap();
        let (err, idx) = max_relative_error(&grads.to_flat(), &num);
        assert!(err < 1e-5, "rel err {err} at {idx}");
    }

    #[test]
    fn extract_is_deterministic_and_row_separable() {
        let mut rng = Rng::new(13);
        let recog = tiny_recog(&mut rng, 4, 3, 2);
        let raw = rng.normal_matrix(3, 4, 1.0);
        let a = extract(&recog, &raw).unwrap();
        assert_eq!(a, extract(&recog, &raw).unwrap());
        assert_eq!(extract(&recog, &raw.select_rows(&[2])).unwrap().row(0), a.row(2));
        let mut zero = recog.clone();
        zero.extractor = MlpParams::zeros(&recog.extractor_spec(None).unwrap());
        assert!(extract(&zero, &raw).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(extract(&recog, &Matrix::zeros(1, 5)).is_err());
    }
}
