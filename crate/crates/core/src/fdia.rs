//! False-data injection: a random contiguous span of a window is overwritten
//! by uniform noise confined to each signal's valid range.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can_codec::SignalCatalog;
use crate::traffic::{Label, SampleWindow};

#[derive(Debug, Error, PartialEq)]
pub enum FdiaError {
    #[error("window is already labelled Attack")]
    AlreadyAttacked,
    #[error("unknown target signal {0:?}")]
    UnknownSignal(String),
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdiaConfig {
    pub attack_span_s: f64,
    /// Empty means every catalog signal.
    pub target_signals: Vec<String>,
    pub rng_seed: u64,
    pub fraction_attacked: f64,
}

impl Default for FdiaConfig {
    fn default() -> Self {
        FdiaConfig { attack_span_s: 1.0, target_signals: Vec::new(), rng_seed: 0, fraction_attacked: 0.5 }
    }
}

impl FdiaConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.attack_span_s > 0.0 && self.attack_span_s <= 10.0) {
            problems.push(format!("fdia.attack_span_s must be in (0, 10], got {}", self.attack_span_s));
        }
        if !(self.fraction_attacked > 0.0 && self.fraction_attacked <= 1.0) {
            problems.push(format!("fdia.fraction_attacked must be in (0, 1], got {}", self.fraction_attacked));
        }
        problems
    }

    fn target_indices(&self, catalog: &SignalCatalog) -> Result<Vec<usize>, FdiaError> {
        if self.target_signals.is_empty() {
            return Ok((0..catalog.signal_count()).collect());
        }
        self.target_signals
            .iter()
            .map(|n| catalog.feature_index(n).ok_or_else(|| FdiaError::UnknownSignal(n.clone())))
            .collect()
    }
}

/// Number of timesteps covered by an attack span inside `window`.
pub fn span_steps(window: &SampleWindow, attack_span_s: f64) -> usize {
    ((attack_span_s * window.rate_hz).round() as usize).clamp(1, window.seq_len())
}

/// Inject uniform noise into one window (physical units).
///
/// For each timestep `t` of the span and each target signal `i` the entry
/// becomes `X + d` with `d ~ U(min_i - X, max_i - X)`, so the result stays in
/// `[min_i, max_i]`. With `min_i = 0` this is `d ~ U(-X, max_i - X)`.
pub fn inject_fdia(
    window: &SampleWindow,
    catalog: &SignalCatalog,
    cfg: &FdiaConfig,
    rng: &mut impl Rng,
) -> Result<SampleWindow, FdiaError> {
    if window.label == Label::Attack {
        return Err(FdiaError::AlreadyAttacked);
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(FdiaError::Config(problems.join("; ")));
    }
    let targets = cfg.target_indices(catalog)?;
    if targets.iter().any(|&i| i >= window.signal_count()) {
        return Err(FdiaError::Config("window has fewer signals than the catalog".into()));
    }
    let len = span_steps(window, cfg.attack_span_s);
    let start = rng.gen_range(0..=window.seq_len() - len);
    let mut out = window.clone();
    for t in start..start + len {
        for &i in &targets {
            let sig = catalog.signal(i);
            let x = out.x[[t, i]];
            let (lo, hi) = (sig.min_phys - x, sig.max_phys - x);
            let delta = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            out.x[[t, i]] = (x + delta).clamp(sig.min_phys, sig.max_phys);
        }
    }
    out.label = Label::Attack;
    out.attack_span = Some((start, len));
    Ok(out)
}

/// Attack `round(fraction_attacked * n)` randomly chosen windows. Selection
/// comes from `rng`; each attacked window then draws from its own stream
/// derived from `cfg.rng_seed` and its index, so results do not depend on
/// processing order.
pub fn craft_attack_dataset(
    samples: &[SampleWindow],
    catalog: &SignalCatalog,
    cfg: &FdiaConfig,
    rng: &mut impl Rng,
) -> Result<Vec<SampleWindow>, FdiaError> {
    if samples.iter().any(|w| w.label == Label::Attack) {
        return Err(FdiaError::AlreadyAttacked);
    }
    let n = samples.len();
    let k = ((cfg.fraction_attacked * n as f64).round() as usize).min(n);
    let mut chosen = vec![false; n];
    for i in sample(rng, n, k).into_iter() {
        chosen[i] = true;
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if chosen[i] {
                let mut stream = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
                stream.set_stream(i as u64 + 1);
                inject_fdia(w, catalog, cfg, &mut stream)
            } else {
                Ok(w.clone())
            }
        })
        .collect()
}

/// Convenience wrapper seeding the selection from `cfg.rng_seed`.
pub fn craft_attack_dataset_seeded(
    samples: &[SampleWindow],
    catalog: &SignalCatalog,
    cfg: &FdiaConfig,
) -> Result<Vec<SampleWindow>, FdiaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    craft_attack_dataset(samples, catalog, cfg, &mut rng)
}
