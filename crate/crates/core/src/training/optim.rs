use std::collections::BTreeMap;
use std::str::FromStr;

use super::checkpoint::NamedArray;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent, kept for comparison runs.
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer {s:?} (adam|sgd)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First/second moment accumulators for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Optimizer over named parameters; state is keyed by parameter name so
/// subsets of a model (e.g. a frozen encoder) can be skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub states: BTreeMap<String, AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            states: BTreeMap::new(),
        }
    }

    /// Applies one update to `params` using their accumulated gradients.
    pub fn step(&mut self, params: Vec<(String, &mut Param)>, cfg: &TrainConfig, learning_rate: f64) -> Result<()> {
        let mut scale = 1.0;
        if let Some(max_norm) = cfg.grad_clip {
            let norm = params.iter().map(|(_, p)| p.grad.sum_sq()).sum::<f64>().sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        let adam = AdamConfig {
            learning_rate,
            ..AdamConfig::from(cfg)
        };
        for (name, p) in params {
            let grads: Vec<f64> = if scale == 1.0 {
                p.grad.data().to_vec()
            } else {
                p.grad.data().iter().map(|g| g * scale).collect()
            };
            match self.kind {
                OptimizerKind::Adam => {
                    let state = self
                        .states
                        .entry(name)
                        .or_insert_with(|| AdamState::new(grads.len()));
                    adam_step(p.value.data_mut(), &grads, state, &adam)?;
                }
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&grads) {
                        *w -= learning_rate * g;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        for (name, s) in &self.states {
            out.push(NamedArray::vector(format!("adam.m/{name}"), s.m.clone()));
            out.push(NamedArray::vector(format!("adam.v/{name}"), s.v.clone()));
            out.push(NamedArray::vector(format!("adam.t/{name}"), vec![s.t as f64]));
        }
        out
    }

    pub fn from_arrays(kind: OptimizerKind, arrays: &[NamedArray]) -> Result<Self> {
        let mut opt = Self::new(kind);
        for a in arrays {
            let Some((field, name)) = a.name.split_once('/') else { continue };
            let state = || AdamState::new(0);
            match field {
                "adam.m" => opt.states.entry(name.to_string()).or_insert_with(state).m = a.data.clone(),
                "adam.v" => opt.states.entry(name.to_string()).or_insert_with(state).v = a.data.clone(),
                "adam.t" => {
                    opt.states.entry(name.to_string()).or_insert_with(state).t =
                        a.data.first().copied().unwrap_or(0.0) as u64
                }
                _ => {}
            }
        }
        Ok(opt)
    }
}
