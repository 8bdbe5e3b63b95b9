//! Training objectives with analytic gradients.
//!
//! Every loss is a batch mean. Randomness (dropout masks, reparameterization
//! noise, prior draws) is taken from the caller's stream in a fixed order, so
//! cloning the stream before a call reproduces the call exactly. That is what
//! the finite-difference checks rely on.
//!
//! Sign conventions:
//!
//! - [`elbo_loss`] returns the negative ELBO (minimized over `theta_e`, `theta_g`).
//! - [`disc_loss`] returns the discriminator objective (maximized over `theta_d`).
//! - [`gen_adv_loss`] returns `-mean Ds(G(z, a), a)` so that minimizing it raises
//!   the critic's score of generated features; `literal_eq4` flips the sign.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::genmodel::{
    decode_pass, discriminate_pass, encode_pass, reparameterize, sigmoid, DiscMode, GaussianPosterior,
    LatentSource, ModelConfig, ModelParams, LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::neural::{gaussian_sample, Matrix, ParamSet, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    ThetaE,
    ThetaG,
    ThetaD,
}

impl ParamKey {
    pub fn name(self) -> &'static str {
        match self {
            ParamKey::ThetaE => "theta_e",
            ParamKey::ThetaG => "theta_g",
            ParamKey::ThetaD => "theta_d",
        }
    }

    pub fn select(self, params: &ModelParams) -> &ParamSet {
        match self {
            ParamKey::ThetaE => &params.theta_e,
            ParamKey::ThetaG => &params.theta_g,
            ParamKey::ThetaD => &params.theta_d,
        }
    }

    pub fn select_mut(self, params: &mut ModelParams) -> &mut ParamSet {
        match self {
            ParamKey::ThetaE => &mut params.theta_e,
            ParamKey::ThetaG => &mut params.theta_g,
            ParamKey::ThetaD => &mut params.theta_d,
        }
    }
}

/// A scalar loss and its gradients for exactly the parameter blocks it depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: BTreeMap<ParamKey, ParamSet>,
}

impl LossValue {
    pub fn new(value: f64) -> Self {
        Self {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub fn with_grad(mut self, key: ParamKey, grad: ParamSet) -> Self {
        self.grads.insert(key, grad);
        self
    }

    pub fn grad(&self, key: ParamKey) -> Option<&ParamSet> {
        self.grads.get(&key)
    }

    /// `self += alpha * other`, merging gradient keys.
    pub fn accumulate(&mut self, alpha: f64, other: &LossValue) -> Result<()> {
        self.value += alpha * other.value;
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => acc.add_scaled(alpha, g)?,
                None => {
                    let mut scaled = g.clone();
                    scaled.scale(alpha);
                    self.grads.insert(*k, scaled);
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(ParamSet::is_finite)
    }
}

/// `KL(q || N(0, I))` averaged over rows, with its gradients.
#[derive(Debug, Clone)]
pub struct KlTerm {
    pub value: f64,
    pub d_mu: Matrix,
    pub d_log_var: Matrix,
}

pub fn kl_gaussian(post: &GaussianPosterior) -> KlTerm {
    let b = post.mu.rows().max(1) as f64;
    let mut value = 0.0;
    for (m, lv) in post.mu.as_slice().iter().zip(post.log_var.as_slice()) {
        value += 0.5 * (m * m + lv.exp() - lv - 1.0);
    }
    KlTerm {
        value: value / b,
        d_mu: post.mu.map(|m| m / b),
        d_log_var: post.log_var.map(|lv| 0.5 * (lv.exp() - 1.0) / b),
    }
}

fn nonempty(rows: usize, what: &str) -> Result<()> {
    if rows == 0 {
        return Err(Error::Shape(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Negative ELBO: `KL + (1/B) sum_i 0.5 ||x_i - De(z_i, a_i)||^2` with one
/// reparameterized `z_i` per row.
pub fn elbo_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Matrix,
    a: &Matrix,
    rng: &mut Rng,
) -> Result<LossValue> {
    nonempty(x.rows(), "elbo_loss")?;
    let rows = x.rows();
    let b = rows as f64;

    let enc_masks = cfg.encoder.sample_masks(rng, rows)?;
    let enc = encode_pass(cfg, params, x, a, Some(&enc_masks))?;
    let (z, eps) = reparameterize(rng, &enc.posterior)?;
    let dec_masks = cfg.decoder.sample_masks(rng, rows)?;
    let (x_hat, dec_cache) = decode_pass(cfg, params, &z, a, Some(&dec_masks))?;

    let kl = kl_gaussian(&enc.posterior);
    let diff = x_hat.zip_map(x, |p, t| p - t)?;
    let recon = 0.5 * diff.as_slice().iter().map(|d| d * d).sum::<f64>() / b;

    let upstream = diff.map(|d| d / b);
    let (grad_g, grad_in) = cfg.decoder.backward(&params.theta_g, &dec_cache, &upstream)?;
    let (grad_z, _) = grad_in.split_cols(cfg.latent_dim);

    let d_mu = grad_z.zip_map(&kl.d_mu, |g, k| g + k)?;
    let mut d_log_var = kl.d_log_var.clone();
    {
        let lv = enc.posterior.log_var.as_slice();
        let raw = enc.raw_log_var.as_slice();
        let gz = grad_z.as_slice();
        let e = eps.as_slice();
        for (i, d) in d_log_var.as_mut_slice().iter_mut().enumerate() {
            *d += gz[i] * e[i] * 0.5 * (0.5 * lv[i]).exp();
            if raw[i] < LOG_VAR_MIN || raw[i] > LOG_VAR_MAX {
                *d = 0.0;
            }
        }
    }
    let (grad_e, _) = cfg
        .encoder
        .backward(&params.theta_e, &enc.cache, &d_mu.hcat(&d_log_var)?)?;

    Ok(LossValue::new(kl.value + recon)
        .with_grad(ParamKey::ThetaE, grad_e)
        .with_grad(ParamKey::ThetaG, grad_g))
}

/// `log sigmoid(v)`, computed stably.
fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

/// Per-row objective value and its derivative for one group of discriminator
/// outputs. `real` selects the real-sample term.
fn disc_term(mode: DiscMode, scores: &Matrix, real: bool) -> (f64, Matrix) {
    let b = scores.rows() as f64;
    match (mode, real) {
        (DiscMode::Critic, true) => (scores.mean(), scores.map(|_| 1.0 / b)),
        (DiscMode::Critic, false) => (-scores.mean(), scores.map(|_| -1.0 / b)),
        (DiscMode::Probabilistic, true) => (
            scores.as_slice().iter().map(|&s| log_sigmoid(s)).sum::<f64>() / b,
            scores.map(|s| (1.0 - sigmoid(s)) / b),
        ),
        (DiscMode::Probabilistic, false) => (
            scores.as_slice().iter().map(|&s| log_sigmoid(-s)).sum::<f64>() / b,
            scores.map(|s| -sigmoid(s) / b),
        ),
    }
}

/// Discriminator objective over real rows, generator fakes from prior draws,
/// and decoder fakes. Fakes are constants here, so only `theta_d` gets a gradient.
pub fn disc_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Matrix,
    a: &Matrix,
    rng: &mut Rng,
) -> Result<LossValue> {
    nonempty(x.rows(), "disc_loss")?;
    let rows = x.rows();

    let z_prior = gaussian_sample(rng, rows, cfg.latent_dim);
    let masks = cfg.decoder.sample_masks(rng, rows)?;
    let (x_gen, _) = decode_pass(cfg, params, &z_prior, a, Some(&masks))?;

    let z_de = match cfg.de_term_z {
        LatentSource::Posterior => {
            let masks = cfg.encoder.sample_masks(rng, rows)?;
            let enc = encode_pass(cfg, params, x, a, Some(&masks))?;
            reparameterize(rng, &enc.posterior)?.0
        }
        LatentSource::Prior => gaussian_sample(rng, rows, cfg.latent_dim),
    };
    let masks = cfg.decoder.sample_masks(rng, rows)?;
    let (x_rec, _) = decode_pass(cfg, params, &z_de, a, Some(&masks))?;

    let mut value = 0.0;
    let mut grad = ParamSet::zeros(params.theta_d.len());
    for (input, real) in [(x, true), (&x_gen, false), (&x_rec, false)] {
        let masks = cfg.discriminator.sample_masks(rng, rows)?;
        let (scores, cache) = discriminate_pass(cfg, params, input, a, Some(&masks))?;
        let (v, up) = disc_term(cfg.disc_mode, &scores, real);
        value += v;
        let (g, _) = cfg.discriminator.backward(&params.theta_d, &cache, &up)?;
        grad.add_scaled(1.0, &g)?;
    }
    Ok(LossValue::new(value).with_grad(ParamKey::ThetaD, grad))
}

/// Generator adversarial term on prior draws; gradients reach `theta_g`
/// through the discriminator, whose parameters stay fixed.
pub fn gen_adv_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    a: &Matrix,
    rng: &mut Rng,
) -> Result<LossValue> {
    nonempty(a.rows(), "gen_adv_loss")?;
    let rows = a.rows();
    let b = rows as f64;
    let sign = if cfg.literal_eq4 { 1.0 } else { -1.0 };

    let z = gaussian_sample(rng, rows, cfg.latent_dim);
    let masks = cfg.decoder.sample_masks(rng, rows)?;
    let (x_gen, gen_cache) = decode_pass(cfg, params, &z, a, Some(&masks))?;
    let masks = cfg.discriminator.sample_masks(rng, rows)?;
    let (scores, disc_cache) = discriminate_pass(cfg, params, &x_gen, a, Some(&masks))?;

    let (value, upstream) = match cfg.disc_mode {
        DiscMode::Critic => (sign * scores.mean(), scores.map(|_| sign / b)),
        // Non-saturating form: -mean log D(G(z)).
        DiscMode::Probabilistic => (
            sign * scores.as_slice().iter().map(|&s| log_sigmoid(s)).sum::<f64>() / b,
            scores.map(|s| sign * (1.0 - sigmoid(s)) / b),
        ),
    };
    let (_, grad_in) = cfg
        .discriminator
        .backward(&params.theta_d, &disc_cache, &upstream)?;
    let (grad_x, _) = grad_in.split_cols(cfg.feature_dim);
    let (grad_g, _) = cfg.decoder.backward(&params.theta_g, &gen_cache, &grad_x)?;
    Ok(LossValue::new(value).with_grad(ParamKey::ThetaG, grad_g))
}

/// Negative ELBO plus `lambda_adv` times the generator adversarial term.
/// With `lambda_adv == 0` the adversarial pass is skipped entirely, so the
/// result and the stream position equal [`elbo_loss`].
pub fn joint_vg_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Matrix,
    a: &Matrix,
    rng: &mut Rng,
    lambda_adv: f64,
) -> Result<LossValue> {
    let mut loss = elbo_loss(cfg, params, x, a, rng)?;
    if lambda_adv != 0.0 {
        let adv = gen_adv_loss(cfg, params, a, rng)?;
        loss.accumulate(lambda_adv, &adv)?;
    }
    Ok(loss)
}
