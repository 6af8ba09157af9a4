//! Iterative adversarial retraining with an append-only adversarial
//! repository.
//!
//! Each iteration draws `N` clean training windows, perturbs them against the
//! current model, appends the perturbed copies (labels kept) to the
//! repository, draws `N` windows back out of the repository and trains one
//! pass over the `2N` mixed batch. The loop stops once adversarial validation
//! accuracy stays at or above `stop_threshold` for `stop_window` consecutive
//! iterations, or after `max_iterations`.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{attack_windows, AttackConfig, AttackError, AttackKind};
use crate::nnet::{evaluate, train_epoch, DetectorModel, NnetError, OptimizerConfig, OptimizerState};
use crate::traffic::SampleWindow;

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] NnetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub batch_n: usize,
    pub max_iterations: usize,
    /// Used round-robin, one per iteration.
    pub attack_cfgs: Vec<AttackConfig>,
    pub stop_window: usize,
    pub stop_threshold: f64,
    pub seed: u64,
    /// Mini-batch size inside the single pass over the `2N` batch.
    pub minibatch_size: usize,
    /// Optimizer for a fresh state when none is carried over from training.
    pub optimizer: OptimizerConfig,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            batch_n: 200,
            max_iterations: 100,
            attack_cfgs: Vec::new(),
            stop_window: 5,
            stop_threshold: 0.99,
            seed: 0,
            minibatch_size: 4,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.batch_n == 0 {
            problems.push("defense.batch_n must be at least 1".into());
        }
        if self.max_iterations == 0 {
            problems.push("defense.max_iterations must be at least 1".into());
        }
        if self.stop_window == 0 {
            problems.push("defense.stop_window must be at least 1".into());
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= 1.0) {
            problems.push(format!("defense.stop_threshold must be in (0, 1], got {}", self.stop_threshold));
        }
        if self.minibatch_size == 0 {
            problems.push("defense.minibatch_size must be at least 1".into());
        }
        if self.attack_cfgs.is_empty() {
            problems.push("defense.attacks must list at least one attack".into());
        }
        for (i, a) in self.attack_cfgs.iter().enumerate() {
            problems.extend(a.validate().into_iter().map(|p| format!("defense.attacks[{i}]: {p}")));
        }
        problems.extend(self.optimizer.validate());
        problems
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub train_acc: f64,
    pub val_clean_acc: f64,
    pub val_adv_acc: f64,
    pub attack_kind: AttackKind,
    pub clean_in_batch: usize,
    pub adversarial_in_batch: usize,
    pub repository_size: usize,
}

#[derive(Debug, Clone)]
pub struct RetrainState {
    pub repository: Vec<SampleWindow>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    pub model: DetectorModel,
    pub optimizer: OptimizerState,
    pub stopped_early: bool,
}

/// Retrain with a fresh optimizer state built from `cfg.optimizer`.
pub fn adversarial_retrain(
    model: DetectorModel,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &RetrainConfig,
) -> Result<RetrainState, DefenseError> {
    let optimizer = OptimizerState::new(cfg.optimizer.clone(), &model.params);
    adversarial_retrain_with_state(model, optimizer, train, val, cfg)
}

/// Retrain continuing from an existing optimizer state.
pub fn adversarial_retrain_with_state(
    model: DetectorModel,
    optimizer: OptimizerState,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &RetrainConfig,
) -> Result<RetrainState, DefenseError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(DefenseError::Contract(problems.join("; ")));
    }
    if train.is_empty() || val.is_empty() {
        return Err(DefenseError::Contract("training and validation sets must be non-empty".into()));
    }
    if cfg.batch_n > train.len() {
        return Err(DefenseError::Contract(format!(
            "batch_n {} exceeds the {} training windows",
            cfg.batch_n,
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = RetrainState {
        repository: Vec::with_capacity(cfg.batch_n * cfg.max_iterations.min(1000)),
        iteration: 0,
        history: Vec::new(),
        model,
        optimizer,
        stopped_early: false,
    };
    let mut streak = 0usize;
    while state.iteration < cfg.max_iterations {
        let i = state.iteration + 1;
        let attack = &cfg.attack_cfgs[(i - 1) % cfg.attack_cfgs.len()];

        let clean: Vec<SampleWindow> = sample(&mut rng, train.len(), cfg.batch_n).into_iter().map(|k| train[k].clone()).collect();
        let adversarial = attack_windows(&state.model, &clean, attack)?;
        state.repository.extend(adversarial);
        let drawn = sample(&mut rng, state.repository.len(), cfg.batch_n);

        let mut batch: Vec<&SampleWindow> = clean.iter().collect();
        batch.extend(drawn.iter().map(|k| &state.repository[k]));
        let (clean_in_batch, adversarial_in_batch) = (clean.len(), drawn.len());
        let (_, train_acc) = train_epoch(&mut state.model, &mut state.optimizer, &batch, cfg.minibatch_size, &mut rng)?;

        let (_, val_clean_acc) = evaluate(&state.model, val)?;
        let val_adv = attack_windows(&state.model, val, attack)?;
        let (_, val_adv_acc) = evaluate(&state.model, &val_adv)?;
        log::info!(
            "retrain {i}/{} [{}]: train {train_acc:.4} val {val_clean_acc:.4} val_adv {val_adv_acc:.4} repo {}",
            cfg.max_iterations,
            attack.kind,
            state.repository.len()
        );
        state.history.push(IterationRecord {
            iteration: i,
            train_acc,
            val_clean_acc,
            val_adv_acc,
            attack_kind: attack.kind,
            clean_in_batch,
            adversarial_in_batch,
            repository_size: state.repository.len(),
        });
        state.iteration = i;
        streak = if val_adv_acc >= cfg.stop_threshold { streak + 1 } else { 0 };
        if streak >= cfg.stop_window {
            state.stopped_early = i < cfg.max_iterations;
            break;
        }
    }
    Ok(state)
}

/// First iteration from which `val_adv_acc` stays within `band` of its final
/// value for the rest of the history.
pub fn plateau_iteration(history: &[IterationRecord], band: f64) -> Option<usize> {
    let last = history.last()?.val_adv_acc;
    let mut start = history.len();
    for (k, r) in history.iter().enumerate().rev() {
        if (r.val_adv_acc - last).abs() > band {
            break;
        }
        start = k;
    }
    Some(history[start].iteration)
}

/// `iteration,train_acc,val_clean_acc,val_adv_acc,attack_kind`
pub fn write_retrain_history_csv<W: Write>(history: &[IterationRecord], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "train_acc", "val_clean_acc", "val_adv_acc", "attack_kind"])?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.train_acc.to_string(),
            r.val_clean_acc.to_string(),
            r.val_adv_acc.to_string(),
            r.attack_kind.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub attack: AttackConfig,
    pub clean_acc: f64,
    pub adv_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean_acc: f64,
    pub attacks: Vec<RobustnessEntry>,
}

/// Clean accuracy plus accuracy under each configured attack.
pub fn evaluate_robustness(
    model: &DetectorModel,
    test: &[SampleWindow],
    attack_cfgs: &[AttackConfig],
) -> Result<RobustnessReport, DefenseError> {
    if test.is_empty() {
        return Err(DefenseError::Contract("test set must be non-empty".into()));
    }
    let (_, clean_acc) = evaluate(model, test)?;
    let mut attacks = Vec::with_capacity(attack_cfgs.len());
    for cfg in attack_cfgs {
        let adv = attack_windows(model, test, cfg)?;
        let (_, adv_acc) = evaluate(model, &adv)?;
        attacks.push(RobustnessEntry { attack: cfg.clone(), clean_acc, adv_acc });
    }
    Ok(RobustnessReport { clean_acc, attacks })
}
