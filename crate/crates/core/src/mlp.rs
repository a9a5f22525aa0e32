//! Fully connected networks with hand-written backward passes.
//!
//! Layers compute `y = act(x·W + b)` with `W` stored `fan_in × fan_out`.
//! A forward pass records an [`MlpTape`]; [`mlp_backward`] replays it in
//! reverse to produce parameter and input gradients.

use crate::error::{DvrError, Result};
use crate::numerics::{Matrix, Rng};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Inverted-dropout rate on hidden-layer outputs. Only applied by
    /// [`mlp_forward_train`] when a generator is supplied.
    pub dropout: Option<f64>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(DvrError::invalid("an MLP needs at least one layer"));
        }
        if widths.contains(&0) {
            return Err(DvrError::invalid("layer widths must be >= 1"));
        }
        if activations.len() != widths.len() - 1 {
            return Err(DvrError::invalid(format!(
                "{} activations for {} layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        Ok(MlpSpec {
            widths,
            activations,
            dropout: None,
        })
    }

    /// Leaky-rectifier hidden layers and a linear output layer.
    pub fn leaky_hidden(widths: Vec<usize>) -> Result<Self> {
        let n = widths.len().saturating_sub(1);
        let mut acts = vec![Activation::LeakyRelu; n];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        Self::new(widths, acts)
    }

    pub fn with_dropout(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DvrError::invalid("dropout rate must lie in [0, 1)"));
        }
        self.dropout = Some(rate);
        Ok(self)
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Gradients share the parameter layout.
pub type MlpGrads = MlpParams;

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        MlpParams { layers }
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Flat views `[W0, b0, W1, b1, ...]` for the optimizers.
    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn block_lens(&self) -> Vec<usize> {
        self.blocks().iter().map(|b| b.len()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.block_lens().iter().sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_spec(&self, spec: &MlpSpec) -> Result<()> {
        let ok = self.layers.len() == spec.num_layers()
            && self
                .layers
                .iter()
                .zip(spec.widths.windows(2))
                .all(|(l, w)| l.weight.shape() == (w[0], w[1]) && l.bias.len() == w[1]);
        if ok {
            Ok(())
        } else {
            Err(DvrError::invalid("MLP parameters do not match their spec"))
        }
    }
}

/// Cached intermediates from one forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input to each layer (the batch, then each hidden activation).
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    /// Scaled keep-masks for layers where dropout fired.
    masks: Vec<Option<Matrix>>,
}

impl MlpTape {
    pub fn batch_rows(&self) -> usize {
        self.inputs[0].rows()
    }
}

/// Weights `~ N(0, scale²/fan_in)`, biases zero.
pub fn mlp_init(spec: &MlpSpec, rng: &mut Rng, scale: f64) -> Result<MlpParams> {
    if !(scale > 0.0) {
        return Err(DvrError::invalid("mlp_init: scale must be > 0"));
    }
    let layers = spec
        .widths
        .windows(2)
        .map(|w| Layer {
            weight: rng.normal_matrix(w[0], w[1], scale / (w[0] as f64).sqrt()),
            bias: vec![0.0; w[1]],
        })
        .collect();
    Ok(MlpParams { layers })
}

pub fn mlp_forward(params: &MlpParams, spec: &MlpSpec, batch: &Matrix) -> Result<(Matrix, MlpTape)> {
    mlp_forward_train(params, spec, batch, None)
}

/// Forward pass with optional dropout; passing `None` disables it.
pub fn mlp_forward_train(
    params: &MlpParams,
    spec: &MlpSpec,
    batch: &Matrix,
    mut dropout_rng: Option<&mut Rng>,
) -> Result<(Matrix, MlpTape)> {
    params.check_spec(spec)?;
    if batch.cols() != spec.input_width() {
        return Err(DvrError::invalid(format!(
            "MLP input has {} columns, expected {}",
            batch.cols(),
            spec.input_width()
        )));
    }
    let n = params.layers.len();
    let mut tape = MlpTape {
        inputs: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
        post: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
    };
    let mut x = batch.clone();
    for (i, (layer, &act)) in params.layers.iter().zip(&spec.activations).enumerate() {
        let mut z = x.matmul(&layer.weight)?;
        z.add_row_broadcast(&layer.bias)?;
        let y = z.map(|v| act.apply(v));
        let hidden = i + 1 < n;
        let mask = match (spec.dropout, dropout_rng.as_deref_mut()) {
            (Some(rate), Some(rng)) if hidden && rate > 0.0 => {
                let keep = 1.0 - rate;
                let data = (0..y.data().len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                Some(Matrix::from_vec(y.rows(), y.cols(), data)?)
            }
            _ => None,
        };
        let out = match &mask {
            Some(m) => y.zip_map(m, |a, b| a * b)?,
            None => y.clone(),
        };
        tape.inputs.push(std::mem::replace(&mut x, out));
        tape.pre.push(z);
        tape.post.push(y);
        tape.masks.push(mask);
    }
    Ok((x, tape))
}

pub fn mlp_backward(
    params: &MlpParams,
    spec: &MlpSpec,
    tape: &MlpTape,
    upstream_grad: &Matrix,
) -> Result<(MlpGrads, Matrix)> {
    params.check_spec(spec)?;
    let n = params.layers.len();
    if tape.pre.len() != n {
        return Err(DvrError::invalid("tape does not belong to this network"));
    }
    let out_shape = tape.pre[n - 1].shape();
    if upstream_grad.shape() != out_shape {
        return Err(DvrError::invalid(format!(
            "upstream gradient {}x{} for output {}x{}",
            upstream_grad.rows(),
            upstream_grad.cols(),
            out_shape.0,
            out_shape.1
        )));
    }
    let mut grads = params.zeros_like();
    let mut g = upstream_grad.clone();
    for i in (0..n).rev() {
        if let Some(mask) = &tape.masks[i] {
            g = g.zip_map(mask, |a, b| a * b)?;
        }
        let act = spec.activations[i];
        let pre = &tape.pre[i];
        let post = &tape.post[i];
        let dz = Matrix::from_vec(
            g.rows(),
            g.cols(),
            g.data()
                .iter()
                .zip(pre.data().iter().zip(post.data()))
                .map(|(&gv, (&x, &y))| gv * act.derivative(x, y))
                .collect(),
        )?;
        grads.layers[i].weight = tape.inputs[i].t_matmul(&dz)?;
        grads.layers[i].bias = dz.sum_rows();
        g = dz.matmul_t(&params.layers[i].weight)?;
    }
    Ok((grads, g))
}
