//! Fully connected stacks with hand-derived backpropagation.
//!
//! Layer `l` computes `y = act(x W_l + b_l)` on row-major batches, where
//! `W_l` is stored `(fan_in x fan_out)`. Hidden activations may be multiplied
//! by an inverted-dropout mask after the nonlinearity; the output layer is
//! always linear and never masked.

use serde::{Deserialize, Serialize};

use super::rng::{dropout_mask, Rng};
use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    dropout_rate: f64,
}

impl MlpSpec {
    /// ReLU on every hidden layer, linear output.
    pub fn new(widths: Vec<usize>, dropout_rate: f64) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let activations = (0..layers)
            .map(|l| {
                if l + 1 == layers {
                    Activation::Linear
                } else {
                    Activation::Relu
                }
            })
            .collect();
        Self::with_activations(widths, activations, dropout_rate)
    }

    pub fn with_activations(
        widths: Vec<usize>,
        activations: Vec<Activation>,
        dropout_rate: f64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least two widths".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero width in {widths:?}")));
        }
        if activations.len() != widths.len() - 1 {
            return Err(Error::Config(format!(
                "{} activations for {} layers",
                activations.len(),
                widths.len() - 1
            )));
        }
        if activations.last() != Some(&Activation::Linear) {
            return Err(Error::Config("final layer must be linear".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        Ok(Self {
            widths,
            activations,
            dropout_rate,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offset of layer `l`'s weight block; its bias block follows it.
    fn layer_offset(&self, layer: usize) -> usize {
        self.widths[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Glorot-uniform weights in `+-sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut values = Vec::with_capacity(self.num_params());
        for w in self.widths.windows(2) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            values.extend((0..w[0] * w[1]).map(|_| rng.uniform_range(-limit, limit)));
            values.extend(std::iter::repeat_n(0.0, w[1]));
        }
        ParamSet::new(values)
    }

    /// Splits a flat parameter vector into `(W, b)` per layer.
    pub fn unflatten(&self, params: &ParamSet) -> Result<Vec<(Matrix, Vec<f64>)>> {
        self.check_params(params)?;
        let mut out = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for w in self.widths.windows(2) {
            let nw = w[0] * w[1];
            let weights = Matrix::from_vec(w[0], w[1], params.values[off..off + nw].to_vec())?;
            let bias = params.values[off + nw..off + nw + w[1]].to_vec();
            off += nw + w[1];
            out.push((weights, bias));
        }
        Ok(out)
    }

    pub fn flatten(&self, layers: &[(Matrix, Vec<f64>)]) -> Result<ParamSet> {
        if layers.len() != self.num_layers() {
            return Err(Error::Shape(format!(
                "{} layers for a {}-layer spec",
                layers.len(),
                self.num_layers()
            )));
        }
        let mut values = Vec::with_capacity(self.num_params());
        for ((weights, bias), w) in layers.iter().zip(self.widths.windows(2)) {
            if weights.shape() != (w[0], w[1]) || bias.len() != w[1] {
                return Err(Error::Shape(format!(
                    "layer block {:?}/{} does not match {}x{}",
                    weights.shape(),
                    bias.len(),
                    w[0],
                    w[1]
                )));
            }
            values.extend_from_slice(weights.as_slice());
            values.extend_from_slice(bias);
        }
        Ok(ParamSet::new(values))
    }

    fn check_params(&self, params: &ParamSet) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter vector of length {} for a spec with {} parameters",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    /// One dropout mask per hidden layer for a batch of `rows`.
    pub fn sample_masks(&self, rng: &mut Rng, rows: usize) -> Result<Vec<Matrix>> {
        self.widths[1..self.widths.len() - 1]
            .iter()
            .map(|&w| dropout_mask(rng, rows, w, self.dropout_rate))
            .collect()
    }

    /// Forward pass. `dropout` holds one mask per hidden layer, or `None`
    /// for evaluation mode.
    pub fn forward(
        &self,
        params: &ParamSet,
        input: &Matrix,
        dropout: Option<&[Matrix]>,
    ) -> Result<(Matrix, ForwardCache)> {
        self.check_params(params)?;
        if input.cols() != self.input_width() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                input.cols(),
                self.input_width()
            )));
        }
        if let Some(masks) = dropout {
            if masks.len() != self.num_layers() - 1 {
                return Err(Error::Shape(format!(
                    "{} dropout masks for {} hidden layers",
                    masks.len(),
                    self.num_layers() - 1
                )));
            }
            for (m, &w) in masks.iter().zip(&self.widths[1..]) {
                if m.shape() != (input.rows(), w) {
                    return Err(Error::Shape(format!(
                        "dropout mask {:?} for activations {}x{w}",
                        m.shape(),
                        input.rows()
                    )));
                }
            }
        }

        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut act = input.clone();
        for l in 0..layers {
            let (weights, bias) = self.layer_view(params, l)?;
            let mut z = act.matmul(&weights)?;
            z.add_row_vector(bias)?;
            let mut h = z.map(|v| self.activations[l].apply(v));
            if l + 1 < layers {
                if let Some(masks) = dropout {
                    h = h.hadamard(&masks[l])?;
                }
            }
            inputs.push(act);
            pre.push(z);
            act = h;
        }
        let cache = ForwardCache {
            widths: self.widths.clone(),
            fingerprint: params.fingerprint(),
            inputs,
            pre,
            masks: dropout.map(|m| m.to_vec()),
        };
        Ok((act, cache))
    }

    /// Gradients of a scalar loss whose gradient with respect to the forward
    /// output is `upstream`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ForwardCache,
        upstream: &Matrix,
    ) -> Result<(ParamSet, Matrix)> {
        if cache.widths != self.widths || cache.fingerprint != params.fingerprint() {
            return Err(Error::Usage(
                "forward cache does not belong to this network and parameter set".into(),
            ));
        }
        let batch = cache.inputs[0].rows();
        if upstream.shape() != (batch, self.output_width()) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?}, expected {batch}x{}",
                upstream.shape(),
                self.output_width()
            )));
        }

        let layers = self.num_layers();
        let mut grads = vec![0.0; self.num_params()];
        let mut g = upstream.clone();
        for l in (0..layers).rev() {
            if l + 1 < layers {
                if let Some(masks) = &cache.masks {
                    g = g.hadamard(&masks[l])?;
                }
            }
            if self.activations[l] == Activation::Relu {
                g = g.zip_map(&cache.pre[l], |gv, z| if z > 0.0 { gv } else { 0.0 })?;
            }
            let (weights, _) = self.layer_view(params, l)?;
            let dw = cache.inputs[l].matmul_t(true, &g, false)?;
            let db = g.col_sums();
            let off = self.layer_offset(l);
            let nw = dw.rows() * dw.cols();
            grads[off..off + nw].copy_from_slice(dw.as_slice());
            grads[off + nw..off + nw + db.len()].copy_from_slice(&db);
            g = g.matmul_t(false, &weights, true)?;
        }
        Ok((ParamSet::new(grads), g))
    }

    fn layer_view<'a>(&self, params: &'a ParamSet, layer: usize) -> Result<(Matrix, &'a [f64])> {
        let (fan_in, fan_out) = (self.widths[layer], self.widths[layer + 1]);
        let off = self.layer_offset(layer);
        let nw = fan_in * fan_out;
        let weights = Matrix::from_vec(fan_in, fan_out, params.values[off..off + nw].to_vec())?;
        Ok((weights, &params.values[off + nw..off + nw + fan_out]))
    }
}

/// Activations recorded by [`MlpSpec::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    widths: Vec<usize>,
    fingerprint: u64,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    masks: Option<Vec<Matrix>>,
}

/// Flat parameter (or gradient) vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    values: Vec<f64>,
}

impl ParamSet {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self::zeros(other.len())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        ensure_len(self, other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// Clamps every entry into `[-c, c]`.
    pub fn clip(&mut self, c: f64) {
        for v in &mut self.values {
            *v = v.clamp(-c, c);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn concat(&self, other: &ParamSet) -> ParamSet {
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        ParamSet::new(values)
    }

    pub fn split_at(&self, at: usize) -> (ParamSet, ParamSet) {
        let (a, b) = self.values.split_at(at);
        (ParamSet::new(a.to_vec()), ParamSet::new(b.to_vec()))
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h ^ self.values.len() as u64
    }
}

pub(crate) fn ensure_len(a: &ParamSet, b: &ParamSet) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "parameter length {} vs gradient length {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}
