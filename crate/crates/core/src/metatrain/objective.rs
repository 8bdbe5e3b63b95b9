use std::collections::BTreeMap;

use super::MetaConfig;
use crate::episodes::TaskData;
use crate::error::{Error, Result};
use crate::genmodel::{DiscMode, ModelConfig, ModelParams};
use crate::losses::{disc_loss, elbo_loss, joint_vg_loss, LossValue, ParamKey};
use crate::neural::{ParamSet, Rng};

/// The pair of per-task objectives the meta-learner optimizes: one minimized
/// over the encoder and generator, one maximized over the discriminator.
pub trait MetaObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Minimized over `theta_e` and `theta_g`.
    fn generator_loss(&self, params: &ModelParams, data: &TaskData, rng: &mut Rng) -> Result<LossValue>;

    /// Maximized over `theta_d`; `None` when the objective has no adversary.
    fn discriminator_loss(
        &self,
        params: &ModelParams,
        data: &TaskData,
        rng: &mut Rng,
    ) -> Result<Option<LossValue>>;

    /// Applied to `theta_d` after every discriminator update.
    fn project_discriminator(&self, _theta_d: &mut ParamSet) {}
}

/// Joint CVAE + conditional GAN objective.
pub struct VganObjective {
    pub cfg: ModelConfig,
    pub lambda_adv: f64,
}

impl MetaObjective for VganObjective {
    fn name(&self) -> &'static str {
        "vgan"
    }

    fn generator_loss(&self, params: &ModelParams, data: &TaskData, rng: &mut Rng) -> Result<LossValue> {
        joint_vg_loss(&self.cfg, params, &data.x, &data.a, rng, self.lambda_adv)
    }

    fn discriminator_loss(
        &self,
        params: &ModelParams,
        data: &TaskData,
        rng: &mut Rng,
    ) -> Result<Option<LossValue>> {
        disc_loss(&self.cfg, params, &data.x, &data.a, rng).map(Some)
    }

    fn project_discriminator(&self, theta_d: &mut ParamSet) {
        if self.cfg.disc_mode == DiscMode::Critic && self.cfg.weight_clip > 0.0 {
            theta_d.clip(self.cfg.weight_clip);
        }
    }
}

/// Conditional VAE alone: no adversarial term, no discriminator updates.
pub struct CvaeObjective {
    pub cfg: ModelConfig,
}

impl MetaObjective for CvaeObjective {
    fn name(&self) -> &'static str {
        "cvae"
    }

    fn generator_loss(&self, params: &ModelParams, data: &TaskData, rng: &mut Rng) -> Result<LossValue> {
        elbo_loss(&self.cfg, params, &data.x, &data.a, rng)
    }

    fn discriminator_loss(&self, _: &ModelParams, _: &TaskData, _: &mut Rng) -> Result<Option<LossValue>> {
        Ok(None)
    }
}

/// Data-free harness: `0.5 ||theta_eg||^2` for the generator side and
/// `-0.5 ||theta_d||^2` for the discriminator side. Its meta-updates can be
/// worked out by hand.
pub struct QuadraticSurrogate;

fn half_sq(p: &ParamSet) -> f64 {
    0.5 * p.as_slice().iter().map(|v| v * v).sum::<f64>()
}

impl MetaObjective for QuadraticSurrogate {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn generator_loss(&self, params: &ModelParams, _: &TaskData, _: &mut Rng) -> Result<LossValue> {
        Ok(LossValue::new(half_sq(&params.theta_e) + half_sq(&params.theta_g))
            .with_grad(ParamKey::ThetaE, params.theta_e.clone())
            .with_grad(ParamKey::ThetaG, params.theta_g.clone()))
    }

    fn discriminator_loss(
        &self,
        params: &ModelParams,
        _: &TaskData,
        _: &mut Rng,
    ) -> Result<Option<LossValue>> {
        let mut g = params.theta_d.clone();
        g.scale(-1.0);
        Ok(Some(LossValue::new(-half_sq(&params.theta_d)).with_grad(ParamKey::ThetaD, g)))
    }
}

pub type ObjectiveFactory = fn(&ModelConfig, &MetaConfig) -> Box<dyn MetaObjective>;

/// Objectives selectable by name.
pub struct ObjectiveRegistry {
    factories: BTreeMap<&'static str, ObjectiveFactory>,
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: ObjectiveFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().map(|k| k.to_string()).collect()
    }

    pub fn create(&self, name: &str, cfg: &ModelConfig, meta: &MetaConfig) -> Result<Box<dyn MetaObjective>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: "objective",
            name: name.to_string(),
            available: self.names(),
        })?;
        Ok(factory(cfg, meta))
    }
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("vgan", |cfg, meta| {
            Box::new(VganObjective {
                cfg: cfg.clone(),
                lambda_adv: meta.lambda_adv,
            })
        });
        r.register("cvae", |cfg, _| Box::new(CvaeObjective { cfg: cfg.clone() }));
        r.register("quadratic", |_, _| Box::new(QuadraticSurrogate));
        r
    }
}
