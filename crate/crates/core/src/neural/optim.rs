//! Parameter updates: plain SGD steps (the inner loop) and Adam (the outer
//! loop), plus a name-keyed registry so the outer optimizer is picked from
//! configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mlp::{ensure_len, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Descend,
    Ascend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Adam first moments; empty for SGD.
    pub m: Vec<f64>,
    /// Adam second moments; empty for SGD.
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            step_count: 0,
            learning_rate,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, len: usize) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// `theta - lr * g` (descend) or `theta + lr * g` (ascend).
pub fn sgd_step(params: &ParamSet, grad: &ParamSet, lr: f64, direction: Direction) -> Result<ParamSet> {
    ensure_len(params, grad)?;
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
    }
    let mut out = params.clone();
    out.add_scaled(direction.sign() * lr, grad)?;
    Ok(out)
}

/// One bias-corrected Adam descent step.
pub fn adam_step(
    state: &OptimizerState,
    params: &ParamSet,
    grad: &ParamSet,
) -> Result<(ParamSet, OptimizerState)> {
    if state.kind != OptimizerKind::Adam {
        return Err(Error::Usage("adam_step called with a non-Adam state".into()));
    }
    ensure_len(params, grad)?;
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "Adam moments of length {} for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    let mut next = state.clone();
    next.step_count += 1;
    let t = next.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = params.clone();
    for (((p, &g), m), v) in out
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(next.m.iter_mut())
        .zip(next.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok((out, next))
}

/// A stateful update rule over one parameter block.
pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, direction: Direction) -> Result<()>;

    fn state(&self) -> &OptimizerState;
}

pub struct Sgd {
    state: OptimizerState,
}

impl Sgd {
    pub fn new(state: OptimizerState) -> Self {
        Self { state }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, direction: Direction) -> Result<()> {
        *params = sgd_step(params, grad, self.state.learning_rate, direction)?;
        self.state.step_count += 1;
        Ok(())
    }

    fn state(&self) -> &OptimizerState {
        &self.state
    }
}

pub struct Adam {
    state: OptimizerState,
}

impl Adam {
    pub fn new(state: OptimizerState) -> Self {
        Self { state }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, direction: Direction) -> Result<()> {
        // Adam is odd in the gradient, so ascent is descent on the negation.
        let (next, state) = match direction {
            Direction::Descend => adam_step(&self.state, params, grad)?,
            Direction::Ascend => {
                let mut neg = grad.clone();
                neg.scale(-1.0);
                adam_step(&self.state, params, &neg)?
            }
        };
        *params = next;
        self.state = state;
        Ok(())
    }

    fn state(&self) -> &OptimizerState {
        &self.state
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub type OptimizerFactory = fn(&OptimizerSettings, usize) -> Box<dyn Optimizer>;

/// Optimizers selectable by name.
pub struct OptimizerRegistry {
    factories: BTreeMap<&'static str, OptimizerFactory>,
}

impl OptimizerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: OptimizerFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().map(|k| k.to_string()).collect()
    }

    pub fn create(&self, name: &str, settings: &OptimizerSettings, len: usize) -> Result<Box<dyn Optimizer>> {
        let factory = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: "optimizer",
            name: name.to_string(),
            available: self.names(),
        })?;
        Ok(factory(settings, len))
    }
}

impl Default for OptimizerRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("sgd", |s, _| Box::new(Sgd::new(OptimizerState::sgd(s.learning_rate))));
        r.register("adam", |s, len| {
            Box::new(Adam::new(OptimizerState::adam(
                s.learning_rate,
                s.beta1,
                s.beta2,
                s.epsilon,
                len,
            )))
        });
        r
    }
}

/// Rebuilds an optimizer from a saved state.
pub fn restore_optimizer(state: OptimizerState) -> Box<dyn Optimizer> {
    match state.kind {
        OptimizerKind::Sgd => Box::new(Sgd::new(state)),
        OptimizerKind::Adam => Box::new(Adam::new(state)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: &[f64]) -> ParamSet {
        ParamSet::new(v.to_vec())
    }

    #[test]
    fn sgd_directions() {
        let out = sgd_step(&p(&[1.0]), &p(&[1.0]), 0.1, Direction::Descend).unwrap();
        assert!((out.as_slice()[0] - 0.9).abs() < 1e-15);
        let out = sgd_step(&p(&[1.0]), &p(&[1.0]), 0.1, Direction::Ascend).unwrap();
        assert!((out.as_slice()[0] - 1.1).abs() < 1e-15);
        let out = sgd_step(&p(&[1.0, -2.0]), &p(&[0.0, 0.0]), 0.1, Direction::Descend).unwrap();
        assert_eq!(out, p(&[1.0, -2.0]));
        assert!(sgd_step(&p(&[1.0]), &p(&[1.0, 2.0]), 0.1, Direction::Descend).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let state = OptimizerState::adam(0.001, 0.9, 0.999, 1e-8, 1);
        let (out, next) = adam_step(&state, &p(&[0.0]), &p(&[1.0])).unwrap();
        assert!((out.as_slice()[0] + 0.001).abs() < 1e-10);
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut state = OptimizerState::adam(0.01, 0.9, 0.999, 1e-8, 2);
        let mut params = p(&[0.3, -0.7]);
        for _ in 0..50 {
            let (next, s) = adam_step(&state, &params, &p(&[0.0, 0.0])).unwrap();
            params = next;
            state = s;
        }
        assert_eq!(params, p(&[0.3, -0.7]));
    }

    #[test]
    fn adam_matches_hand_trace() {
        // Hand-unrolled Adam on a single coordinate, gradients 0.5, -1.0, 2.0.
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let grads = [0.5, -1.0, 2.0];
        let mut theta = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut expected = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            expected.push(theta);
        }
        let mut state = OptimizerState::adam(lr, b1, b2, eps, 1);
        let mut params = p(&[1.0]);
        for (g, e) in grads.iter().zip(expected) {
            let (next, s) = adam_step(&state, &params, &p(&[*g])).unwrap();
            params = next;
            state = s;
            assert!((params.as_slice()[0] - e).abs() < 1e-12);
        }
        assert_eq!(state.step_count, 3);
    }

    #[test]
    fn adam_rejects_sgd_state() {
        assert!(adam_step(&OptimizerState::sgd(0.1), &p(&[1.0]), &p(&[1.0])).is_err());
    }

    #[test]
    fn registry_lookup() {
        let reg = OptimizerRegistry::default();
        let settings = OptimizerSettings {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut sgd = reg.create("sgd", &settings, 1).unwrap();
        let mut params = p(&[1.0]);
        sgd.step(&mut params, &p(&[0.9]), Direction::Descend).unwrap();
        assert!((params.as_slice()[0] - 0.91).abs() < 1e-15);
        let mut adam = reg.create("adam", &settings, 1).unwrap();
        adam.step(&mut params, &p(&[1.0]), Direction::Ascend).unwrap();
        assert!(params.as_slice()[0] > 0.91);
        assert!(matches!(
            reg.create("lbfgs", &settings, 1),
            Err(Error::UnknownStrategy { .. })
        ));
    }
}
