//! White-box gradient attacks on the detector: FGSM and BIM.
//!
//! Attacks work in the model's normalized input space, where the valid
//! domain of every signal is `[0, 1]`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{backward_batch, classify, forward_batch, predict_proba_arrays, DetectorModel, NnetError};
use crate::traffic::{Label, SampleWindow};

/// Windows attacked per forward/backward pass.
const ATTACK_CHUNK: usize = 64;

pub const DOMAIN: (f64, f64) = (0.0, 1.0);

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error("empty test set")]
    EmptySet,
    #[error(transparent)]
    Model(#[from] NnetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Fgsm => "FGSM",
            AttackKind::Bim => "BIM",
        })
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            other => Err(format!("unknown attack {other:?}")),
        }
    }
}

/// Which timesteps an attack may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbRegion {
    #[default]
    WholeWindow,
    /// Only the injected span of Attack windows; windows without a recorded
    /// span are perturbed everywhere.
    AttackedSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub clamp_to_domain: bool,
    /// Reuse the gradient at the clean input for every BIM step.
    #[serde(default)]
    pub frozen_gradient: bool,
    #[serde(default)]
    pub region: PerturbRegion,
}

fn default_alpha() -> f64 {
    0.0
}

fn default_iterations() -> usize {
    5
}

fn default_true() -> bool {
    true
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            alpha: epsilon,
            iterations: 1,
            clamp_to_domain: true,
            frozen_gradient: false,
            region: PerturbRegion::WholeWindow,
        }
    }

    pub fn bim(epsilon: f64, alpha: f64, iterations: usize) -> Self {
        AttackConfig { kind: AttackKind::Bim, alpha, iterations, ..AttackConfig::fgsm(epsilon) }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            problems.push(format!("attack epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if self.kind == AttackKind::Bim {
            if !(self.alpha > 0.0) {
                problems.push(format!("BIM alpha must be positive, got {}", self.alpha));
            }
            if self.alpha > self.epsilon {
                problems.push(format!("BIM alpha {} exceeds epsilon {}", self.alpha, self.epsilon));
            }
            if self.iterations == 0 {
                problems.push("BIM iterations must be at least 1".into());
            }
        }
        problems
    }

    fn check(&self) -> Result<(), AttackError> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(AttackError::Config(problems.join("; ")))
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => format!("FGSM(eps={})", self.epsilon),
            AttackKind::Bim => format!("BIM(eps={}, alpha={}, iters={})", self.epsilon, self.alpha, self.iterations),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Array2<f64>,
    pub original_prediction: Label,
    pub adversarial_prediction: Label,
    pub flipped: bool,
    pub l_inf_distance: f64,
    pub l2_distance: f64,
}

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn region_mask(window: &SampleWindow, region: PerturbRegion) -> Option<(usize, usize)> {
    match (region, window.attack_span) {
        (PerturbRegion::AttackedSpan, Some(span)) => Some(span),
        _ => None,
    }
}

fn input_gradients(model: &DetectorModel, xs: &[ArrayView2<f64>], labels: &[f64]) -> Result<Vec<Array2<f64>>, AttackError> {
    let cache = forward_batch(model, xs)?;
    Ok(backward_batch(model, &cache, labels, 1.0, false)?.inputs)
}

/// `x + step * sign(grad)` restricted to the rows of `span` when given.
fn signed_step(x: &mut Array2<f64>, grad: &Array2<f64>, step: f64, span: Option<(usize, usize)>) {
    let rows = span.map_or(0..x.nrows(), |(s, l)| s..(s + l).min(x.nrows()));
    for t in rows {
        for (v, g) in x.row_mut(t).iter_mut().zip(grad.row(t)) {
            *v += step * sign(*g);
        }
    }
}

/// Perturb a batch of windows. The result has one matrix per input.
pub fn perturb_batch(
    model: &DetectorModel,
    windows: &[&SampleWindow],
    cfg: &AttackConfig,
) -> Result<Vec<Array2<f64>>, AttackError> {
    cfg.check()?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(ATTACK_CHUNK) {
        let clean: Vec<ArrayView2<f64>> = chunk.iter().map(|w| w.x.view()).collect();
        let labels: Vec<f64> = chunk.iter().map(|w| w.label.as_f64()).collect();
        let spans: Vec<Option<(usize, usize)>> = chunk.iter().map(|w| region_mask(w, cfg.region)).collect();
        let mut adv: Vec<Array2<f64>> = chunk.iter().map(|w| w.x.clone()).collect();
        if cfg.epsilon > 0.0 {
            match cfg.kind {
                AttackKind::Fgsm => {
                    let grads = input_gradients(model, &clean, &labels)?;
                    for ((x, g), span) in adv.iter_mut().zip(&grads).zip(&spans) {
                        signed_step(x, g, cfg.epsilon, *span);
                    }
                }
                AttackKind::Bim => {
                    let frozen = if cfg.frozen_gradient { Some(input_gradients(model, &clean, &labels)?) } else { None };
                    for _ in 0..cfg.iterations {
                        let fresh;
                        let grads = match &frozen {
                            Some(g) => g,
                            None => {
                                let views: Vec<ArrayView2<f64>> = adv.iter().map(|a| a.view()).collect();
                                fresh = input_gradients(model, &views, &labels)?;
                                &fresh
                            }
                        };
                        for (((x, g), span), x0) in adv.iter_mut().zip(grads).zip(&spans).zip(&clean) {
                            signed_step(x, g, cfg.alpha, *span);
                            Zip::from(x).and(x0).for_each(|v, &c| {
                                *v = v.max(c - cfg.epsilon).min(c + cfg.epsilon);
                            });
                        }
                    }
                }
            }
        }
        if cfg.clamp_to_domain {
            for x in &mut adv {
                x.mapv_inplace(|v| v.clamp(DOMAIN.0, DOMAIN.1));
            }
        }
        out.extend(adv);
    }
    Ok(out)
}

fn outcome(model: &DetectorModel, window: &SampleWindow, adversarial: Array2<f64>) -> Result<AttackOutcome, AttackError> {
    let probs = predict_proba_arrays(model, &[window.x.view(), adversarial.view()])?;
    let th = model.config.threshold;
    let (original_prediction, adversarial_prediction) = (classify(probs[0], th), classify(probs[1], th));
    let diff = &adversarial - &window.x;
    Ok(AttackOutcome {
        l_inf_distance: diff.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        l2_distance: diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
        adversarial,
        original_prediction,
        adversarial_prediction,
        flipped: original_prediction != adversarial_prediction,
    })
}

/// `X' = X + ε·sign(∇_X J(X, y))`, then clamped to the domain if requested.
pub fn fgsm(model: &DetectorModel, window: &SampleWindow, cfg: &AttackConfig) -> Result<AttackOutcome, AttackError> {
    if cfg.kind != AttackKind::Fgsm {
        return Err(AttackError::Config("fgsm called with a BIM config".into()));
    }
    let adv = perturb_batch(model, &[window], cfg)?.pop().expect("one window");
    outcome(model, window, adv)
}

/// Iterated signed-gradient steps of size α, each followed by clipping to
/// the ε-box around the clean input.
pub fn bim(model: &DetectorModel, window: &SampleWindow, cfg: &AttackConfig) -> Result<AttackOutcome, AttackError> {
    if cfg.kind != AttackKind::Bim {
        return Err(AttackError::Config("bim called with an FGSM config".into()));
    }
    let adv = perturb_batch(model, &[window], cfg)?.pop().expect("one window");
    outcome(model, window, adv)
}

/// Perturb every window with `cfg`, keeping labels and metadata.
pub fn attack_windows(model: &DetectorModel, windows: &[SampleWindow], cfg: &AttackConfig) -> Result<Vec<SampleWindow>, AttackError> {
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    let adv = perturb_batch(model, &refs, cfg)?;
    Ok(windows.iter().zip(adv).map(|(w, x)| SampleWindow { x, ..w.clone() }).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassOutcome {
    pub total: usize,
    pub correct_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub success_rate: f64,
    pub post_attack_accuracy: f64,
    pub clean_accuracy: f64,
    pub normal: ClassOutcome,
    pub attack: ClassOutcome,
}

/// Untargeted attack on every window; success is misclassification after
/// perturbation, so `success_rate = 1 - post_attack_accuracy`.
pub fn attack_success_rate(model: &DetectorModel, test: &[SampleWindow], cfg: &AttackConfig) -> Result<AttackReport, AttackError> {
    if test.is_empty() {
        return Err(AttackError::EmptySet);
    }
    let refs: Vec<&SampleWindow> = test.iter().collect();
    let adv = perturb_batch(model, &refs, cfg)?;
    let th = model.config.threshold;
    let clean_views: Vec<ArrayView2<f64>> = test.iter().map(|w| w.x.view()).collect();
    let adv_views: Vec<ArrayView2<f64>> = adv.iter().map(|a| a.view()).collect();
    let clean_probs = predict_proba_arrays(model, &clean_views)?;
    let adv_probs = predict_proba_arrays(model, &adv_views)?;

    let mut clean_correct = 0usize;
    let mut normal = ClassOutcome { total: 0, correct_after: 0 };
    let mut attack = ClassOutcome { total: 0, correct_after: 0 };
    for ((w, pc), pa) in test.iter().zip(&clean_probs).zip(&adv_probs) {
        clean_correct += usize::from(classify(*pc, th) == w.label);
        let class = if w.label == Label::Attack { &mut attack } else { &mut normal };
        class.total += 1;
        class.correct_after += usize::from(classify(*pa, th) == w.label);
    }
    let n = test.len() as f64;
    let post_attack_accuracy = (normal.correct_after + attack.correct_after) as f64 / n;
    Ok(AttackReport {
        success_rate: 1.0 - post_attack_accuracy,
        post_attack_accuracy,
        clean_accuracy: clean_correct as f64 / n,
        normal,
        attack,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub success_rate: f64,
    pub post_attack_accuracy: f64,
}

impl SweepRow {
    pub fn config(&self, template: &AttackConfig) -> AttackConfig {
        AttackConfig { kind: self.kind, epsilon: self.epsilon, alpha: self.alpha, iterations: self.iterations, ..template.clone() }
    }
}

/// Success rate for each ε in ascending `eps_list`. For BIM, each ε is run
/// once per entry of `alpha_fractions` with `α = fraction·ε`; for FGSM the
/// fractions are ignored.
pub fn epsilon_sweep(
    model: &DetectorModel,
    test: &[SampleWindow],
    template: &AttackConfig,
    eps_list: &[f64],
    alpha_fractions: &[f64],
) -> Result<Vec<SweepRow>, AttackError> {
    if eps_list.is_empty() {
        return Err(AttackError::Config("empty epsilon list".into()));
    }
    if eps_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(AttackError::Config("epsilon list must be ascending".into()));
    }
    let fractions: &[f64] = if template.kind == AttackKind::Fgsm || alpha_fractions.is_empty() { &[1.0] } else { alpha_fractions };
    let mut rows = Vec::new();
    for &eps in eps_list {
        for &frac in fractions {
            let cfg = match template.kind {
                AttackKind::Fgsm => AttackConfig { epsilon: eps, alpha: eps, iterations: 1, ..template.clone() },
                AttackKind::Bim => AttackConfig { epsilon: eps, alpha: frac * eps, ..template.clone() },
            };
            let report = attack_success_rate(model, test, &cfg)?;
            log::info!("{}: success {:.4}", cfg.label(), report.success_rate);
            rows.push(SweepRow {
                kind: cfg.kind,
                epsilon: eps,
                alpha: cfg.alpha,
                iterations: cfg.iterations,
                success_rate: report.success_rate,
                post_attack_accuracy: report.post_attack_accuracy,
            });
        }
    }
    Ok(rows)
}

/// Row with the highest success rate; ties go to the smaller ε.
pub fn best_row(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.success_rate >= r.success_rate => Some(b),
        _ => Some(r),
    })
}

/// `kind,epsilon,alpha,iterations,success_rate,post_attack_accuracy`
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["kind", "epsilon", "alpha", "iterations", "success_rate", "post_attack_accuracy"])?;
    for r in rows {
        w.write_record([
            r.kind.to_string(),
            r.epsilon.to_string(),
            r.alpha.to_string(),
            r.iterations.to_string(),
            r.success_rate.to_string(),
            r.post_attack_accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
