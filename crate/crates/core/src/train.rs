//! Toy-scale optimization loop: round-robin over scenes, one scene per step,
//! decoupled-weight-decay Adam on every named parameter.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::loss::scene_loss;
use crate::model::{bind_params, forward, ModelParams};
use crate::scene::{Config, Scene};
use crate::synth::{synth_queries, GenConfig};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adam moment accumulators, shaped exactly like the parameter store.
pub struct OptimState {
    pub opt: OptimConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(params: &ModelParams, opt: OptimConfig) -> Self {
        let zeros = |p: &ModelParams| -> BTreeMap<String, Vec<f64>> {
            p.entries
                .iter()
                .map(|(name, t)| (name.clone(), vec![0.0; t.values.len()]))
                .collect()
        };
        OptimState { opt, step: 0, m: zeros(params), v: zeros(params) }
    }
}

#[derive(Debug)]
pub enum TrainError {
    /// A gradient came back non-finite; stepping would poison the parameter.
    BadGradient { param: String },
    /// Parameter and gradient stores disagree.
    GradientShape { param: String },
    /// Total loss left the trustworthy range. History up to and including
    /// the offending step is preserved.
    Diverged { step: usize, loss: f64, history: Vec<StepLosses> },
    NoScenes,
    Tensor(TensorError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::BadGradient { param } => {
                write!(f, "non-finite gradient for parameter '{param}'")
            }
            TrainError::GradientShape { param } => {
                write!(f, "gradient length mismatch for parameter '{param}'")
            }
            TrainError::Diverged { step, loss, .. } => {
                write!(f, "training diverged at step {step}: total loss {loss}")
            }
            TrainError::NoScenes => write!(f, "training needs at least one scene"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// One decoupled AdamW update over every parameter, in name order.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimState,
) -> Result<(), TrainError> {
    // validate everything before touching any value, so a failed step
    // leaves the parameters exactly as they were
    for (name, p) in &params.entries {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::GradientShape { param: name.clone() })?;
        if g.len() != p.values.len() {
            return Err(TrainError::GradientShape { param: name.clone() });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::BadGradient { param: name.clone() });
        }
    }
    state.step += 1;
    let o = state.opt;
    let t = state.step as i32;
    let bc1 = 1.0 - o.beta1.powi(t);
    let bc2 = 1.0 - o.beta2.powi(t);
    for (name, p) in params.entries.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("moment mirrors params");
        let v = state.v.get_mut(name).expect("moment mirrors params");
        for i in 0..p.values.len() {
            m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
            v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.values[i] =
                p.values[i] * (1.0 - o.lr * o.weight_decay) - o.lr * m_hat / (v_hat.sqrt() + o.eps);
        }
    }
    Ok(())
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: usize,
    pub det_cls: f64,
    pub det_reg: f64,
    pub map_cls: f64,
    pub map_reg: f64,
    pub mot_reg: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<StepLosses>,
}

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Runs `steps` optimization steps, visiting scenes round-robin (one scene
/// per step; each step's gradient is that scene's summed loss). The matching
/// is recomputed from detached forward values every step. `log` sees every
/// step row as it happens.
pub fn train_toy(
    scenes: &[Scene],
    mut params: ModelParams,
    config: &Config,
    gen: &GenConfig,
    steps: usize,
    opt: OptimConfig,
    mut log: impl FnMut(&StepLosses),
) -> Result<TrainOutcome, TrainError> {
    if scenes.is_empty() {
        return Err(TrainError::NoScenes);
    }
    let mut state = OptimState::new(&params, opt);
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let scene = &scenes[step % scenes.len()];
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params)?;
        let bundle = synth_queries(&mut tape, scene, &bound, config, gen)?;
        let out = forward(&mut tape, &bundle, &bound, config)?;
        let losses = scene_loss(&mut tape, &out, scene, config)?;
        let [det_cls, det_reg, map_cls, map_reg, mot_reg] = losses.parts.values();
        let total = losses.total.value();
        let row = StepLosses { step, det_cls, det_reg, map_cls, map_reg, mot_reg, total };
        log(&row);
        history.push(row);
        if !(total.is_finite() && total <= DIVERGENCE_LIMIT) {
            return Err(TrainError::Diverged { step, loss: total, history });
        }
        let grads = tape.backward(&losses.total)?;
        let grads = bound.collect_grads(&grads);
        adamw_step(&mut params, &grads, &mut state)?;
    }
    Ok(TrainOutcome { params, history })
}
