//! Adam with the inverse-square-root warmup schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Element, Tensor};
use super::var::Gradients;
use crate::error::{Error, Result};

pub const DEFAULT_WARMUP: u64 = 10_000;
pub const DEFAULT_BASE_LR: f64 = 2e-3;

/// `base · min(step^-0.5, step · warmup^-1.5)`
pub fn lr_at(step: u64, warmup: u64, base: f64) -> Result<f64> {
    if step == 0 {
        return Err(Error::input(
            "learning-rate schedule is defined from step 1",
        ));
    }
    if warmup == 0 {
        return Err(Error::input("warmup must be positive"));
    }
    let s = step as f64;
    let w = warmup as f64;
    let decay = 1.0 / s.sqrt();
    let ramp = s / (w * w.sqrt());
    Ok(base * decay.min(ramp))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub warmup: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            warmup: DEFAULT_WARMUP,
            base_lr: DEFAULT_BASE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Element = f32> {
    pub step: u64,
    pub config: AdamConfig,
    pub first_moment: BTreeMap<String, Tensor<F>>,
    pub second_moment: BTreeMap<String, Tensor<F>>,
}

impl<F: Element> OptimizerState<F> {
    pub fn new(config: AdamConfig, params: &BTreeMap<String, Tensor<F>>) -> Self {
        let first_moment = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect::<BTreeMap<_, _>>();
        OptimizerState {
            step: 0,
            config,
            second_moment: first_moment.clone(),
            first_moment,
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> Result<f64> {
        lr_at(self.step + 1, self.config.warmup, self.config.base_lr)
    }
}

/// One bias-corrected Adam update. Returns the learning rate applied.
pub fn adam_step<F: Element>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
) -> Result<f64> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::input(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::input(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !state.first_moment.contains_key(name) {
            return Err(Error::input(format!("optimizer has no moments for {name}")));
        }
    }
    state.step += 1;
    let c = state.config;
    let lr = lr_at(state.step, c.warmup, c.base_lr)?;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
    let (bc1, bc2) = (F::of(bc1), F::of(bc2));
    let (lr_f, eps) = (F::of(lr), F::of(c.eps));

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above").data();
        let m = state
            .first_moment
            .get_mut(name)
            .expect("checked above")
            .data_mut();
        let v = state
            .second_moment
            .get_mut(name)
            .expect("checked above")
            .data_mut();
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi = *pi - lr_f * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(lr)
}
