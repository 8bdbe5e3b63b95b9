//! Episodic meta-training of the generative model.
//!
//! Each outer step samples a batch of tasks, adapts a copy of the parameters
//! on the support sets with plain gradient steps (descent for the encoder and
//! generator, ascent for the discriminator, losses averaged over the batch),
//! evaluates the adapted copy on the query sets, and applies the query
//! gradients to the original parameters with the outer optimizer. The
//! meta-gradient is first order: the query gradient at the adapted point
//! stands in for the gradient with respect to the original parameters.
//!
//! Random streams for a run with seed `s` (see [`crate::neural::streams`]):
//! `Rng::derive(s, INIT)` initializes parameters, `Rng::derive(s, TASKS)`
//! samples task batches, and `Rng::derive(s, NOISE)` feeds every loss
//! evaluation. Within an outer step the noise stream is consumed in this
//! order: for each inner step, generator losses of all tasks then
//! discriminator losses of all tasks; then the same for the query sets.

mod objective;

pub use objective::{
    CvaeObjective, MetaObjective, ObjectiveFactory, ObjectiveRegistry, QuadraticSurrogate, VganObjective,
};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::{format_real, DatasetBundle};
use crate::episodes::{sample_task_batch, ClassPool, EpisodeConfig, SplitRegistry, SplitStrategy, TaskData};
use crate::error::{Error, Result};
use crate::genmodel::{Checkpoint, ModelConfig, ModelParams};
use crate::losses::{LossValue, ParamKey};
use crate::neural::{
    restore_optimizer, streams, Direction, Optimizer, OptimizerRegistry, OptimizerSettings, ParamSet, Rng,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner step size for the encoder and generator.
    pub eta1: f64,
    /// Inner step size for the discriminator.
    pub eta2: f64,
    pub inner_steps: usize,
    pub task_batch_size: usize,
    pub outer_steps: usize,
    pub outer_optimizer: String,
    pub outer: OptimizerSettings,
    pub lambda_adv: f64,
    pub meta_enabled: bool,
    pub meta_on_generator: bool,
    pub meta_on_discriminator: bool,
    pub disjoint_tasks: bool,
    pub cvae_only: bool,
    pub first_order: bool,
    /// Steps between checkpoints; `0` keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            eta1: 1e-3,
            eta2: 1e-3,
            inner_steps: 3,
            task_batch_size: 4,
            outer_steps: 2000,
            outer_optimizer: "adam".into(),
            outer: OptimizerSettings::default(),
            lambda_adv: 1.0,
            meta_enabled: true,
            meta_on_generator: true,
            meta_on_discriminator: true,
            disjoint_tasks: true,
            cvae_only: false,
            first_order: true,
            checkpoint_interval: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, eta) in [("eta1", self.eta1), ("eta2", self.eta2)] {
            if !(eta == 0.0 || (1e-8..=1e-1).contains(&eta)) {
                return Err(Error::Config(format!(
                    "{name} = {eta} outside [1e-8, 1e-1] (0 disables the inner step)"
                )));
            }
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if self.task_batch_size == 0 {
            return Err(Error::Config("task_batch_size must be >= 1".into()));
        }
        if !self.first_order {
            return Err(Error::Config(
                "only the first-order meta-gradient is implemented; set first_order = true".into(),
            ));
        }
        if self.outer.learning_rate.is_nan() || self.outer.learning_rate <= 0.0 {
            return Err(Error::Config("outer learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Registry name of the objective these toggles select.
    pub fn objective_name(&self) -> &'static str {
        if self.cvae_only {
            "cvae"
        } else {
            "vgan"
        }
    }

    /// Registry name of the split strategy these toggles select.
    pub fn split_name(&self) -> &'static str {
        if self.disjoint_tasks {
            "disjoint"
        } else {
            "standard"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean generator-side support loss over inner steps (0 without inner adaptation).
    pub inner_vg: f64,
    /// Mean discriminator objective over inner steps (0 when not adapted).
    pub inner_d: f64,
    pub outer_vg: f64,
    /// Query discriminator objective (0 for objectives without a discriminator).
    pub outer_d: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub records: Vec<TraceRecord>,
}

impl LossTrace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One `step<TAB>inner_vg<TAB>inner_d<TAB>outer_vg<TAB>outer_d` line.
    pub fn format_record(r: &TraceRecord) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.step,
            format_real(r.inner_vg),
            format_real(r.inner_d),
            format_real(r.outer_vg),
            format_real(r.outer_d)
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = write!(out, "{}", Self::format_record(r));
        }
        out
    }
}

/// Support and query data for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub support: TaskData,
    pub query: TaskData,
}

pub struct TrainState {
    pub params: ModelParams,
    /// Outer optimizers for `theta_e`, `theta_g`, `theta_d`.
    pub optimizers: Vec<Box<dyn Optimizer>>,
    pub step: usize,
    pub trace: LossTrace,
    pub seed: u64,
    pub task_rng: Rng,
    pub noise_rng: Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, meta: &MetaConfig, seed: u64) -> Result<Self> {
        Self::with_registry(params, meta, seed, &OptimizerRegistry::default())
    }

    pub fn with_registry(
        params: ModelParams,
        meta: &MetaConfig,
        seed: u64,
        registry: &OptimizerRegistry,
    ) -> Result<Self> {
        let optimizers = [&params.theta_e, &params.theta_g, &params.theta_d]
            .iter()
            .map(|p| registry.create(&meta.outer_optimizer, &meta.outer, p.len()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            optimizers,
            step: 0,
            trace: LossTrace::default(),
            seed,
            task_rng: Rng::derive(seed, streams::TASKS),
            noise_rng: Rng::derive(seed, streams::NOISE),
        })
    }

    pub fn checkpoint(&self, config: &ModelConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            params: self.params.clone(),
            optimizers: self.optimizers.iter().map(|o| o.state().clone()).collect(),
            seed: self.seed,
            step: self.step as u64,
        }
    }

    /// Restores parameters and optimizer states from a checkpoint. Random
    /// streams restart from the checkpoint seed.
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            params: ck.params.clone(),
            optimizers: ck.optimizers.iter().cloned().map(restore_optimizer).collect(),
            step: ck.step as usize,
            trace: LossTrace::default(),
            seed: ck.seed,
            task_rng: Rng::derive(ck.seed, streams::TASKS),
            noise_rng: Rng::derive(ck.seed, streams::NOISE),
        }
    }
}

/// Parameters initialized from the run seed's `INIT` stream.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    ModelParams::init(cfg, &mut Rng::derive(seed, streams::INIT))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InnerStats {
    pub vg: f64,
    pub d: f64,
}

/// Mean of per-task losses, reduced in task order.
fn batch_mean<F>(tasks: &[&TaskData], mut f: F) -> Result<Option<LossValue>>
where
    F: FnMut(&TaskData) -> Result<Option<LossValue>>,
{
    let w = 1.0 / tasks.len() as f64;
    let mut acc: Option<LossValue> = None;
    for t in tasks {
        if let Some(l) = f(t)? {
            match &mut acc {
                Some(a) => a.accumulate(w, &l)?,
                None => {
                    let mut a = LossValue::new(0.0);
                    a.accumulate(w, &l)?;
                    acc = Some(a);
                }
            }
        }
    }
    Ok(acc)
}

fn grad_or_zero(loss: &LossValue, key: ParamKey, like: &ParamSet) -> ParamSet {
    loss.grad(key).cloned().unwrap_or_else(|| ParamSet::zeros_like(like))
}

pub struct MetaTrainer {
    objective: Box<dyn MetaObjective>,
    split: Box<dyn SplitStrategy>,
    meta: MetaConfig,
    episodes: EpisodeConfig,
}

impl MetaTrainer {
    pub fn new(
        objective: Box<dyn MetaObjective>,
        split: Box<dyn SplitStrategy>,
        meta: MetaConfig,
        episodes: EpisodeConfig,
    ) -> Result<Self> {
        meta.validate()?;
        episodes.validate()?;
        Ok(Self {
            objective,
            split,
            meta,
            episodes,
        })
    }

    /// Builds the trainer the config toggles select from the default registries.
    pub fn from_config(model: &ModelConfig, meta: MetaConfig, episodes: EpisodeConfig) -> Result<Self> {
        let objective = ObjectiveRegistry::default().create(meta.objective_name(), model, &meta)?;
        let split = SplitRegistry::default().create(meta.split_name())?;
        Self::new(objective, split, meta, episodes)
    }

    pub fn meta(&self) -> &MetaConfig {
        &self.meta
    }

    pub fn objective(&self) -> &dyn MetaObjective {
        self.objective.as_ref()
    }

    /// Adapted copy of `params` after `inner_steps` batch-averaged steps on
    /// the support sets. The input is never modified.
    pub fn inner_adapt(
        &self,
        params: &ModelParams,
        supports: &[&TaskData],
        rng: &mut Rng,
    ) -> Result<(ModelParams, InnerStats)> {
        if supports.is_empty() {
            return Err(Error::Config("inner adaptation needs at least one task".into()));
        }
        let mut adapted = params.clone();
        let mut stats = InnerStats::default();
        let steps = self.meta.inner_steps as f64;
        for _ in 0..self.meta.inner_steps {
            let vg = if self.meta.meta_on_generator {
                batch_mean(supports, |t| self.objective.generator_loss(&adapted, t, rng).map(Some))?
            } else {
                None
            };
            let d = if self.meta.meta_on_discriminator {
                batch_mean(supports, |t| self.objective.discriminator_loss(&adapted, t, rng))?
            } else {
                None
            };
            if let Some(vg) = vg {
                check_finite(&vg, "inner generator loss")?;
                stats.vg += vg.value / steps;
                for key in [ParamKey::ThetaE, ParamKey::ThetaG] {
                    let g = grad_or_zero(&vg, key, key.select(&adapted));
                    key.select_mut(&mut adapted).add_scaled(-self.meta.eta1, &g)?;
                }
            }
            if let Some(d) = d {
                check_finite(&d, "inner discriminator loss")?;
                stats.d += d.value / steps;
                let g = grad_or_zero(&d, ParamKey::ThetaD, &adapted.theta_d);
                adapted.theta_d.add_scaled(self.meta.eta2, &g)?;
                self.objective.project_discriminator(&mut adapted.theta_d);
            }
        }
        Ok((adapted, stats))
    }

    /// One global update of `state` from a batch of tasks.
    pub fn outer_update(&self, state: &mut TrainState, batch: &[TaskPair]) -> Result<TraceRecord> {
        let step = state.step;
        let diverged = |message: String, trace: &LossTrace| Error::Divergence {
            step,
            message,
            trace: Box::new(trace.clone()),
        };
        let supports: Vec<&TaskData> = batch.iter().map(|t| &t.support).collect();
        let queries: Vec<&TaskData> = batch.iter().map(|t| &t.query).collect();

        let (adapted, inner) = if self.meta.meta_enabled {
            self.inner_adapt(&state.params, &supports, &mut state.noise_rng)
                .map_err(|e| match e {
                    Error::Numeric(m) => diverged(m, &state.trace),
                    other => other,
                })?
        } else {
            (state.params.clone(), InnerStats::default())
        };

        let rng = &mut state.noise_rng;
        let vg = batch_mean(&queries, |t| self.objective.generator_loss(&adapted, t, rng).map(Some))?
            .ok_or_else(|| Error::Config("empty task batch".into()))?;
        let d = batch_mean(&queries, |t| self.objective.discriminator_loss(&adapted, t, rng))?;
        if !vg.is_finite() {
            return Err(diverged(format!("outer generator loss {}", vg.value), &state.trace));
        }
        if let Some(d) = &d {
            if !d.is_finite() {
                return Err(diverged(format!("outer discriminator loss {}", d.value), &state.trace));
            }
        }

        for (i, key) in [ParamKey::ThetaE, ParamKey::ThetaG].into_iter().enumerate() {
            let g = grad_or_zero(&vg, key, key.select(&state.params));
            state.optimizers[i].step(key.select_mut(&mut state.params), &g, Direction::Descend)?;
        }
        if let Some(d) = &d {
            let g = grad_or_zero(d, ParamKey::ThetaD, &state.params.theta_d);
            state.optimizers[2].step(&mut state.params.theta_d, &g, Direction::Ascend)?;
            self.objective.project_discriminator(&mut state.params.theta_d);
        }
        if !state.params.is_finite() {
            return Err(diverged("non-finite parameters after update".into(), &state.trace));
        }

        let record = TraceRecord {
            step: step + 1,
            inner_vg: inner.vg,
            inner_d: inner.d,
            outer_vg: vg.value,
            outer_d: d.map_or(0.0, |d| d.value),
        };
        state.step += 1;
        state.trace.push(record);
        Ok(record)
    }

    /// Samples the next task batch from the state's task stream.
    pub fn next_batch(&self, state: &mut TrainState, bundle: &DatasetBundle, pool: &ClassPool) -> Result<Vec<TaskPair>> {
        let tasks = sample_task_batch(
            pool,
            &self.episodes,
            &mut state.task_rng,
            self.split.as_ref(),
            self.meta.task_batch_size,
        )?;
        tasks
            .iter()
            .map(|t| {
                Ok(TaskPair {
                    support: t.support_data(bundle)?,
                    query: t.query_data(bundle)?,
                })
            })
            .collect()
    }

    /// Runs `outer_steps` outer updates. `on_step` sees the state after every
    /// step (checkpointing, trace files).
    pub fn train(
        &self,
        mut state: TrainState,
        bundle: &DatasetBundle,
        pool: &ClassPool,
        mut on_step: impl FnMut(&TrainState, &TraceRecord) -> Result<()>,
    ) -> Result<TrainState> {
        for _ in 0..self.meta.outer_steps {
            let batch = self.next_batch(&mut state, bundle, pool)?;
            let record = self.outer_update(&mut state, &batch)?;
            on_step(&state, &record)?;
        }
        Ok(state)
    }
}

fn check_finite(loss: &LossValue, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} is not finite ({})", loss.value)))
    }
}
