use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam state keyed by parameter name; only trainable tensors have entries.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub hyper: AdamConfig,
    pub moments: BTreeMap<String, Moments>,
}

impl OptimState {
    pub fn new(params: &ModelParams, hyper: AdamConfig) -> Self {
        let moments = params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Moments {
                        m: vec![0.0; t.len()],
                        v: vec![0.0; t.len()],
                    },
                )
            })
            .collect();
        OptimState {
            step: 0,
            hyper,
            moments,
        }
    }
}

/// One bias-corrected Adam update of every trainable tensor from its `grad`.
pub fn adam_step(params: &mut ModelParams, state: &mut OptimState, lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        if t.requires_grad && t.grad.is_none() {
            return Err(Error::MissingGradient(name.to_string()));
        }
        if t.requires_grad != state.moments.contains_key(name) {
            return Err(Error::Config(format!(
                "optimizer state does not match trainable flag of {name}"
            )));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.hyper;
    let c1 = 1.0 - beta1.powf(state.step as f64);
    let c2 = 1.0 - beta2.powf(state.step as f64);
    for (name, t) in params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        let mo = state.moments.get_mut(name).expect("checked above");
        let g = t.grad.take().expect("checked above");
        let data = t.data_mut();
        for i in 0..data.len() {
            mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
            mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = mo.m[i] / c1;
            let vh = mo.v[i] / c2;
            data[i] -= lr * mh / (vh.sqrt() + eps);
        }
        t.grad = Some(g);
    }
    Ok(())
}
