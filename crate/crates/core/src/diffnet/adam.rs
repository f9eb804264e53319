use std::collections::BTreeMap;

use super::layer::LayerParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(|v| v.as_slice())
    }
}

/// One bias-corrected Adam update over every weight and bias with a gradient
/// in `grads`. Parameters without a gradient entry are left alone.
///
/// A non-finite gradient aborts the step before anything is modified.
pub fn adam_step(
    layers: Vec<&mut LayerParams>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Diverged(format!("non-finite gradient for {name}")));
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for layer in layers {
        let targets = [
            (format!("{}.weight", layer.name), &mut layer.weight),
            (format!("{}.bias", layer.name), &mut layer.bias),
        ];
        for (name, param) in targets {
            let Some(g) = grads.get(&name) else { continue };
            if g.len() != param.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{} gradient values for {name}", param.len()),
                    format!("{}", g.len()),
                ));
            }
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = state.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for (k, p) in param.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
