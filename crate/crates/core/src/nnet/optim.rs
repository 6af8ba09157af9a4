use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::LstmParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    #[serde(rename = "rmsprop")]
    RmsProp,
    Adagrad,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] =
        [OptimizerKind::RmsProp, OptimizerKind::Adam, OptimizerKind::Adagrad, OptimizerKind::Sgd];
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "SGD",
            OptimizerKind::Adam => "Adam",
            OptimizerKind::RmsProp => "RMSprop",
            OptimizerKind::Adagrad => "Adagrad",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(format!("unknown optimizer {other:?}")),
        }
    }
}

pub const DEFAULT_CLIP_NORM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub epsilon: f64,
    /// Starting value of Adagrad's squared-gradient sums.
    pub initial_accumulator: f64,
    /// Rescale each gradient so its global L2 norm is at most this value
    /// before the update. `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        let learning_rate = match kind {
            OptimizerKind::Adam | OptimizerKind::RmsProp => 0.001,
            OptimizerKind::Adagrad | OptimizerKind::Sgd => 0.01,
        };
        OptimizerConfig {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-7,
            initial_accumulator: 0.1,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push(format!("optimizer.learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("rho", self.rho)] {
            if !(0.0..1.0).contains(&v) {
                problems.push(format!("optimizer.{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("optimizer.epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.initial_accumulator >= 0.0) {
            problems.push("optimizer.initial_accumulator must be non-negative".to_string());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                problems.push(format!("optimizer.clip_norm must be positive, got {c}"));
            }
        }
        problems
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::new(OptimizerKind::Adam)
    }
}

/// Per-parameter accumulators. `first` holds Adam's first moment; `second`
/// holds Adam's second moment, RMSprop's running mean square or Adagrad's
/// squared-gradient sum.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: LstmParams,
    pub second: LstmParams,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, like: &LstmParams) -> Self {
        let first = like.zeros_like();
        let mut second = like.zeros_like();
        if config.kind == OptimizerKind::Adagrad {
            for block in second.slices_mut() {
                block.fill(config.initial_accumulator);
            }
        }
        OptimizerState { config, step: 0, first, second }
    }

    /// Apply one update to `params` from `grads`.
    pub fn step(&mut self, params: &mut LstmParams, grads: &LstmParams) {
        assert_eq!(params.len(), grads.len(), "gradient shape");
        assert_eq!(params.len(), self.first.len(), "optimizer state shape");
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as f64;
        let scale = match c.clip_norm {
            Some(max) => {
                let norm = grads.slices().iter().flat_map(|b| b.iter()).map(|g| g * g).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let blocks = params.slices_mut().into_iter().zip(grads.slices()).zip(self.first.slices_mut()).zip(self.second.slices_mut());
        for (((p, g), m), v) in blocks {
            match c.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= c.learning_rate * scale * g;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powf(t);
                    let bc2 = 1.0 - c.beta2.powf(t);
                    for i in 0..p.len() {
                        let g = scale * g[i];
                        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
                OptimizerKind::RmsProp => {
                    for i in 0..p.len() {
                        let g = scale * g[i];
                        v[i] = c.rho * v[i] + (1.0 - c.rho) * g * g;
                        p[i] -= c.learning_rate * g / (v[i].sqrt() + c.epsilon);
                    }
                }
                OptimizerKind::Adagrad => {
                    for i in 0..p.len() {
                        let g = scale * g[i];
                        v[i] += g * g;
                        p[i] -= c.learning_rate * g / (v[i].sqrt() + c.epsilon);
                    }
                }
            }
        }
    }
}
