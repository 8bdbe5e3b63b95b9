#![allow(dead_code)]

use metavgan::genmodel::{HiddenWidths, ModelConfig, ModelParams};
use metavgan::losses::ParamKey;
use metavgan::neural::{finite_diff_grad, max_relative_error, Matrix, ParamSet, Rng};

/// Finite-difference step and the magnitude below which errors are absolute.
pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

/// A random tiny model and batch: D <= 16, d_a <= 4, d_z <= 4, batch <= 6.
pub struct TinyCase {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub x: Matrix,
    pub a: Matrix,
}

pub fn tiny_case(seed: u64) -> TinyCase {
    let mut rng = Rng::new(1000 + seed);
    let d = 1 + rng.below(16);
    let da = 1 + rng.below(4);
    let dz = 1 + rng.below(4);
    let batch = 1 + rng.below(6);
    let hidden = HiddenWidths {
        encoder: vec![2 + rng.below(6), 2 + rng.below(5)],
        decoder: vec![2 + rng.below(6)],
        discriminator: vec![2 + rng.below(6), 2 + rng.below(5)],
    };
    let dropout = if seed.is_multiple_of(2) { 0.0 } else { 0.3 };
    let mut cfg = ModelConfig::new(d, da, dz, &hidden, dropout).unwrap();
    // Clipping is a projection applied after updates, not part of the loss.
    cfg.weight_clip = 0.0;
    let mut params = ModelParams::init(&cfg, &mut rng);
    // Zero initial biases put whole dead rows exactly on a ReLU kink.
    for block in [&mut params.theta_e, &mut params.theta_g, &mut params.theta_d] {
        for v in block.as_mut_slice() {
            *v += 0.1 * rng.normal();
        }
    }
    let mut sample = |rows, cols| {
        let v = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::from_vec(rows, cols, v).unwrap()
    };
    let x = sample(batch, d);
    let a = sample(batch, da);
    TinyCase { cfg, params, x, a }
}

/// Max relative error between `analytic` and a central-difference gradient
/// of `loss` over the concatenation of the parameter `blocks`.
pub fn fd_error<F>(params: &ModelParams, blocks: &[ParamKey], analytic: &ParamSet, mut loss: F) -> f64
where
    F: FnMut(&ModelParams) -> f64,
{
    let flat = blocks
        .iter()
        .fold(ParamSet::new(vec![]), |acc, &b| acc.concat(b.select(params)));
    let numeric = finite_diff_grad(
        |p| {
            let mut probe = params.clone();
            let mut rest = p.clone();
            for &b in blocks {
                let (head, tail) = rest.split_at(b.select(params).len());
                *b.select_mut(&mut probe) = head;
                rest = tail;
            }
            loss(&probe)
        },
        &flat,
        FD_STEP,
    )
    .unwrap();
    max_relative_error(analytic, &numeric, FD_FLOOR)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
