//! The conditional VAE-GAN: encoder `E`, decoder/generator `De = G` sharing
//! one parameter block, and the conditional discriminator `Ds`.
//!
//! All three networks take the class attribute vector concatenated to their
//! primary input:
//!
//! - encoder: `[x | a] -> [mu | log_var]`
//! - decoder/generator: `[z | a] -> x_hat`
//! - discriminator: `[x | a] -> score`

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{gaussian_sample, ForwardCache, Matrix, MlpSpec, ParamSet, Rng};

/// Bounds applied to the encoder's log-variance head.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// How the discriminator output is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiscMode {
    /// Unbounded realness score, Wasserstein-style objectives.
    #[default]
    Critic,
    /// Sigmoid probability with log-likelihood objectives.
    Probabilistic,
}

/// Which latent code feeds the decoder's fake term in the discriminator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    #[default]
    Posterior,
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub latent_dim: usize,
    pub encoder: MlpSpec,
    pub decoder: MlpSpec,
    pub discriminator: MlpSpec,
    pub dropout_rate: f64,
    pub disc_mode: DiscMode,
    pub de_term_z: LatentSource,
    /// Critic weights are clamped to `[-weight_clip, weight_clip]` after each
    /// discriminator update; `0` disables clipping.
    pub weight_clip: f64,
    /// Flip the generator's adversarial sign to the literal joint-objective form.
    pub literal_eq4: bool,
}

/// Hidden widths of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HiddenWidths {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub discriminator: Vec<usize>,
}

impl Default for HiddenWidths {
    /// Three encoder layers, two decoder layers, three discriminator layers.
    fn default() -> Self {
        Self {
            encoder: vec![1024, 512],
            decoder: vec![1024],
            discriminator: vec![1024, 512],
        }
    }
}

impl ModelConfig {
    pub fn new(
        feature_dim: usize,
        attr_dim: usize,
        latent_dim: usize,
        hidden: &HiddenWidths,
        dropout_rate: f64,
    ) -> Result<Self> {
        let widths = |input: usize, hidden: &[usize], output: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(output);
            w
        };
        let cfg = Self {
            feature_dim,
            attr_dim,
            latent_dim,
            encoder: MlpSpec::new(
                widths(feature_dim + attr_dim, &hidden.encoder, 2 * latent_dim),
                dropout_rate,
            )?,
            decoder: MlpSpec::new(
                widths(latent_dim + attr_dim, &hidden.decoder, feature_dim),
                dropout_rate,
            )?,
            discriminator: MlpSpec::new(
                widths(feature_dim + attr_dim, &hidden.discriminator, 1),
                dropout_rate,
            )?,
            dropout_rate,
            disc_mode: DiscMode::Critic,
            de_term_z: LatentSource::Posterior,
            weight_clip: 0.01,
            literal_eq4: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, expected: usize, found: usize| {
            if expected != found {
                Err(Error::DimensionMismatch {
                    what: what.to_string(),
                    expected,
                    found,
                })
            } else {
                Ok(())
            }
        };
        if self.feature_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("feature and latent dimensions must be positive".into()));
        }
        check("encoder input", self.feature_dim + self.attr_dim, self.encoder.input_width())?;
        check("encoder output", 2 * self.latent_dim, self.encoder.output_width())?;
        check("decoder input", self.latent_dim + self.attr_dim, self.decoder.input_width())?;
        check("decoder output", self.feature_dim, self.decoder.output_width())?;
        check(
            "discriminator input",
            self.feature_dim + self.attr_dim,
            self.discriminator.input_width(),
        )?;
        check("discriminator output", 1, self.discriminator.output_width())?;
        if self.weight_clip < 0.0 {
            return Err(Error::Config("weight_clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta_e: ParamSet,
    /// Shared by the decoder and the generator.
    pub theta_g: ParamSet,
    pub theta_d: ParamSet,
}

impl ModelParams {
    /// Fresh Glorot-uniform initialization, drawn encoder, decoder, discriminator in that order.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        Self {
            theta_e: cfg.encoder.init_params(rng),
            theta_g: cfg.decoder.init_params(rng),
            theta_d: cfg.discriminator.init_params(rng),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.theta_e.is_finite() && self.theta_g.is_finite() && self.theta_d.is_finite()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for (what, spec, p) in [
            ("theta_e", &cfg.encoder, &self.theta_e),
            ("theta_g", &cfg.decoder, &self.theta_g),
            ("theta_d", &cfg.discriminator, &self.theta_d),
        ] {
            if spec.num_params() != p.len() {
                return Err(Error::DimensionMismatch {
                    what: what.into(),
                    expected: spec.num_params(),
                    found: p.len(),
                });
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        self.theta_e.fingerprint()
            ^ self.theta_g.fingerprint().rotate_left(21)
            ^ self.theta_d.fingerprint().rotate_left(42)
    }
}

/// Diagonal Gaussian `q(z | x, a)`, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Matrix,
    /// Already clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Matrix,
}

fn check_rows(x: &Matrix, a: &Matrix, x_cols: usize, a_cols: usize, what: &str) -> Result<()> {
    if x.cols() != x_cols || a.cols() != a_cols || x.rows() != a.rows() {
        return Err(Error::Shape(format!(
            "{what}: got {:?} and attributes {:?}, expected ?x{x_cols} and ?x{a_cols} with equal rows",
            x.shape(),
            a.shape()
        )));
    }
    Ok(())
}

/// Encoder pass plus what backpropagation through it needs.
pub(crate) struct EncoderPass {
    pub posterior: GaussianPosterior,
    pub raw_log_var: Matrix,
    pub cache: ForwardCache,
}

pub(crate) fn encode_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Matrix,
    a: &Matrix,
    masks: Option<&[Matrix]>,
) -> Result<EncoderPass> {
    check_rows(x, a, cfg.feature_dim, cfg.attr_dim, "encoder input")?;
    let (h, cache) = cfg.encoder.forward(&params.theta_e, &x.hcat(a)?, masks)?;
    let (mu, raw_log_var) = h.split_cols(cfg.latent_dim);
    let log_var = raw_log_var.map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
    Ok(EncoderPass {
        posterior: GaussianPosterior { mu, log_var },
        raw_log_var,
        cache,
    })
}

/// Encoder in evaluation mode.
pub fn encode(cfg: &ModelConfig, params: &ModelParams, x: &Matrix, a: &Matrix) -> Result<GaussianPosterior> {
    Ok(encode_pass(cfg, params, x, a, None)?.posterior)
}

/// `z = mu + exp(log_var / 2) * eps` for a given noise matrix.
pub fn reparameterize_with(post: &GaussianPosterior, eps: &Matrix) -> Result<Matrix> {
    post.mu.ensure_same_shape(eps)?;
    let std = post.log_var.map(|lv| (0.5 * lv).exp());
    post.mu.zip_map(&std.hadamard(eps)?, |m, s| m + s)
}

/// Draws `eps ~ N(0, I)` and returns `(z, eps)`.
pub fn reparameterize(rng: &mut Rng, post: &GaussianPosterior) -> Result<(Matrix, Matrix)> {
    let eps = gaussian_sample(rng, post.mu.rows(), post.mu.cols());
    let z = reparameterize_with(post, &eps)?;
    Ok((z, eps))
}

pub(crate) fn decode_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    z: &Matrix,
    a: &Matrix,
    masks: Option<&[Matrix]>,
) -> Result<(Matrix, ForwardCache)> {
    check_rows(z, a, cfg.latent_dim, cfg.attr_dim, "decoder input")?;
    cfg.decoder.forward(&params.theta_g, &z.hcat(a)?, masks)
}

/// Decoder/generator in evaluation mode. The same call serves the
/// reconstruction path (posterior `z`) and the generation path (prior `z`).
pub fn decode(cfg: &ModelConfig, params: &ModelParams, z: &Matrix, a: &Matrix) -> Result<Matrix> {
    Ok(decode_pass(cfg, params, z, a, None)?.0)
}

/// Raw discriminator outputs (logits in probabilistic mode).
pub(crate) fn discriminate_pass(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Matrix,
    a: &Matrix,
    masks: Option<&[Matrix]>,
) -> Result<(Matrix, ForwardCache)> {
    check_rows(x, a, cfg.feature_dim, cfg.attr_dim, "discriminator input")?;
    cfg.discriminator.forward(&params.theta_d, &x.hcat(a)?, masks)
}

/// One score per row: the critic value, or the probability of "real" in
/// probabilistic mode.
pub fn discriminate(cfg: &ModelConfig, params: &ModelParams, x: &Matrix, a: &Matrix) -> Result<Vec<f64>> {
    let (s, _) = discriminate_pass(cfg, params, x, a, None)?;
    Ok(match cfg.disc_mode {
        DiscMode::Critic => s.into_vec(),
        DiscMode::Probabilistic => s.as_slice().iter().map(|&v| sigmoid(v)).collect(),
    })
}

/// `n` synthetic features for one attribute vector, each from a fresh prior draw.
pub fn synthesize(
    cfg: &ModelConfig,
    params: &ModelParams,
    rng: &mut Rng,
    attributes: &[f64],
    n: usize,
) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::Config("synthesize needs n >= 1".into()));
    }
    if attributes.len() != cfg.attr_dim {
        return Err(Error::Shape(format!(
            "attribute vector of length {}, model expects {}",
            attributes.len(),
            cfg.attr_dim
        )));
    }
    let z = gaussian_sample(rng, n, cfg.latent_dim);
    let a = Matrix::from_rows(&vec![attributes; n])?;
    decode(cfg, params, &z, &a)
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
