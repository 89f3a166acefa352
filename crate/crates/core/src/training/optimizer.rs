use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{read_bundle, write_bundle};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())))
            .unzip();
        OptimizerState { config, step: 0, m, v }
    }
}

/// One decoupled-weight-decay Adam update of every parameter.
pub fn adamw_step<F: Scalar>(
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
    let bc1 = F::of(1.0 - c.beta1.powi(t));
    let bc2 = F::of(1.0 - c.beta2.powi(t));
    let (lr, eps, wd) = (F::of(lr), F::of(c.eps), F::of(c.weight_decay));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, gd) = (p.data_mut(), g.data());
        for i in 0..pd.len() {
            let mi = b1 * m.data()[i] + one_b1 * gd[i];
            let vi = b2 * v.data()[i] + one_b2 * gd[i] * gd[i];
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            pd[i] = pd[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * pd[i]);
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    adamw: AdamWConfig,
}

const STATE_FILE: &str = "trainer_state.json";
const MOMENTS_MANIFEST: &str = "optimizer_manifest.json";
const MOMENTS_BIN: &str = "optimizer.bin";

pub fn save_optimizer(state: &OptimizerState<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = TrainerState {
        step: state.step,
        adamw: state.config,
    };
    std::fs::write(dir.join(STATE_FILE), serde_json::to_vec_pretty(&meta)?)?;
    let named: Vec<(String, &Tensor<f32>)> = state
        .m
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("m.{i}"), t))
        .chain(state.v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t)))
        .collect();
    write_bundle(dir, MOMENTS_MANIFEST, MOMENTS_BIN, &named)
}

/// Restores optimizer moments saved next to a checkpoint; shapes are
/// checked against `params`.
pub fn load_optimizer<'a>(dir: &Path, params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<OptimizerState<f32>> {
    let meta: TrainerState = serde_json::from_slice(&std::fs::read(dir.join(STATE_FILE))?)?;
    let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
    let mut tensors = read_bundle(dir, MOMENTS_MANIFEST, MOMENTS_BIN)?;
    if tensors.len() != 2 * shapes.len() {
        return Err(Error::Checkpoint(format!(
            "optimizer state holds {} tensors, model needs {}",
            tensors.len(),
            2 * shapes.len()
        )));
    }
    let v: Vec<Tensor<f32>> = tensors.split_off(shapes.len()).into_iter().map(|(_, t)| t).collect();
    let m: Vec<Tensor<f32>> = tensors.into_iter().map(|(_, t)| t).collect();
    for (i, s) in shapes.iter().enumerate() {
        if m[i].shape() != s.as_slice() || v[i].shape() != s.as_slice() {
            return Err(Error::Checkpoint(format!("optimizer moment {i} does not match parameter shape {s:?}")));
        }
    }
    Ok(OptimizerState {
        config: meta.adamw,
        step: meta.step,
        m,
        v,
    })
}
