//! The run configuration: one TOML document holding every stage's settings
//! and every seed.

use std::path::{Path, PathBuf};

use canguard::attacks::{AttackConfig, AttackKind, PerturbRegion};
use canguard::dataset::DataConfig;
use canguard::defense::RetrainConfig;
use canguard::nnet::{ModelConfig, OptimizerConfig, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root directory for every stage's outputs.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// DBC file; the bundled catalog is used when absent.
    #[serde(default)]
    pub dbc: Option<PathBuf>,
    /// Decoded trace CSV to window instead of a synthetic trace.
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: default_out_dir(),
            dbc: None,
            trace: None,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            defense: DefenseSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub init_seed: u64,
    pub threshold: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection { hidden_dim: m.hidden_dim, init_seed: m.init_seed, threshold: m.threshold }
    }
}

/// Optimizer settings; unset hyperparameters take the kind's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub beta1: Option<f64>,
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub initial_accumulator: Option<f64>,
    /// Gradient global-norm ceiling; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl OptimizerSection {
    pub fn of(kind: OptimizerKind) -> Self {
        OptimizerSection {
            kind,
            learning_rate: None,
            beta1: None,
            beta2: None,
            rho: None,
            epsilon: None,
            initial_accumulator: None,
            clip_norm: None,
        }
    }

    pub fn resolve(&self) -> OptimizerConfig {
        let d = OptimizerConfig::new(self.kind);
        OptimizerConfig {
            kind: self.kind,
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            beta1: self.beta1.unwrap_or(d.beta1),
            beta2: self.beta2.unwrap_or(d.beta2),
            rho: self.rho.unwrap_or(d.rho),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            initial_accumulator: self.initial_accumulator.unwrap_or(d.initial_accumulator),
            clip_norm: match self.clip_norm {
                Some(c) if c == 0.0 => None,
                Some(c) => Some(c),
                None => d.clip_norm,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub optimizer: OptimizerSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            shuffle_seed: t.shuffle_seed,
            optimizer: OptimizerSection::of(OptimizerKind::Adam),
        }
    }
}

impl TrainSection {
    pub fn resolve(&self, optimizer: &OptimizerSection) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: optimizer.resolve(),
            shuffle_seed: self.shuffle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Ascending ε values in normalized units.
    pub fgsm_epsilons: Vec<f64>,
    pub bim_epsilons: Vec<f64>,
    /// BIM step sizes as fractions of ε.
    pub bim_alpha_fractions: Vec<f64>,
    pub bim_iterations: usize,
    pub clamp_to_domain: bool,
    pub frozen_gradient: bool,
    pub region: PerturbRegion,
    /// Recorded in the provenance sidecar of persisted adversarial sets.
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            fgsm_epsilons: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            bim_epsilons: vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.5],
            bim_alpha_fractions: vec![0.2, 0.5, 1.0],
            bim_iterations: 5,
            clamp_to_domain: true,
            frozen_gradient: false,
            region: PerturbRegion::AttackedSpan,
            seed: 0,
        }
    }
}

impl AttackSection {
    pub fn template(&self, kind: AttackKind) -> AttackConfig {
        let base = match kind {
            AttackKind::Fgsm => AttackConfig::fgsm(0.0),
            AttackKind::Bim => AttackConfig::bim(0.0, 0.0, self.bim_iterations),
        };
        AttackConfig {
            clamp_to_domain: self.clamp_to_domain,
            frozen_gradient: self.frozen_gradient,
            region: self.region,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub batch_n: usize,
    pub max_iterations: usize,
    pub stop_window: usize,
    pub stop_threshold: f64,
    pub seed: u64,
    pub minibatch_size: usize,
    /// Explicit threat models. When empty, the best FGSM and BIM rows of the
    /// attack stage's sweep are used.
    pub attacks: Vec<AttackConfig>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let r = RetrainConfig::default();
        DefenseSection {
            batch_n: r.batch_n,
            max_iterations: r.max_iterations,
            stop_window: r.stop_window,
            stop_threshold: r.stop_threshold,
            seed: r.seed,
            minibatch_size: r.minibatch_size,
            attacks: Vec::new(),
        }
    }
}

impl DefenseSection {
    pub fn resolve(&self, attacks: Vec<AttackConfig>, optimizer: OptimizerConfig) -> RetrainConfig {
        RetrainConfig {
            batch_n: self.batch_n,
            max_iterations: self.max_iterations,
            attack_cfgs: attacks,
            stop_window: self.stop_window,
            stop_threshold: self.stop_threshold,
            seed: self.seed,
            minibatch_size: self.minibatch_size,
            optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Optimizers trained side by side by `eval --compare`.
    pub optimizers: Vec<OptimizerSection>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { optimizers: OptimizerKind::ALL.iter().map(|k| OptimizerSection::of(*k)).collect() }
    }
}

fn check_eps_list(name: &str, list: &[f64], problems: &mut Vec<String>) {
    if list.is_empty() {
        problems.push(format!("attack.{name} must not be empty"));
    }
    if list.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        problems.push(format!("attack.{name} entries must be finite and non-negative"));
    }
    if list.windows(2).any(|w| w[0] > w[1]) {
        problems.push(format!("attack.{name} must be ascending"));
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Resolve relative paths against the directory holding the config file.
    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(p) = self.dbc.as_mut() {
            fix(p);
        }
        if let Some(p) = self.trace.as_mut() {
            fix(p);
        }
    }

    /// Replace every seed with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.data.trace_seed = seed;
        self.data.split_seed = seed;
        self.data.fdia.rng_seed = seed;
        self.model.init_seed = seed;
        self.train.shuffle_seed = seed;
        self.attack.seed = seed;
        self.defense.seed = seed;
    }

    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("data.trace_seed", self.data.trace_seed),
            ("data.split_seed", self.data.split_seed),
            ("data.fdia.rng_seed", self.data.fdia.rng_seed),
            ("model.init_seed", self.model.init_seed),
            ("train.shuffle_seed", self.train.shuffle_seed),
            ("attack.seed", self.attack.seed),
            ("defense.seed", self.defense.seed),
        ]
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.model.hidden_dim,
            seq_len: self.data.seq_len(),
            init_seed: self.model.init_seed,
            threshold: self.model.threshold,
        }
    }

    /// Every problem with the configuration, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.data.validate();
        problems.extend(self.model_config(20).validate());
        problems.extend(self.train.resolve(&self.train.optimizer).validate().into_iter().map(|p| format!("train: {p}")));
        for (name, list) in [("fgsm_epsilons", &self.attack.fgsm_epsilons), ("bim_epsilons", &self.attack.bim_epsilons)] {
            check_eps_list(name, list, &mut problems);
        }
        if self.attack.bim_alpha_fractions.is_empty()
            || self.attack.bim_alpha_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            problems.push("attack.bim_alpha_fractions must be non-empty with entries in (0, 1]".into());
        }
        if self.attack.bim_iterations == 0 {
            problems.push("attack.bim_iterations must be at least 1".into());
        }
        // Attacks may be resolved later from the sweep; validate the rest with a placeholder.
        let placeholder = if self.defense.attacks.is_empty() { vec![AttackConfig::fgsm(0.0)] } else { self.defense.attacks.clone() };
        problems.extend(self.defense.resolve(placeholder, self.train.optimizer.resolve()).validate());
        if self.eval.optimizers.is_empty() {
            problems.push("eval.optimizers must not be empty".into());
        }
        for (i, o) in self.eval.optimizers.iter().enumerate() {
            problems.extend(o.resolve().validate().into_iter().map(|p| format!("eval.optimizers[{i}]: {p}")));
        }
        if let Some(p) = &self.dbc {
            if !p.is_file() {
                problems.push(format!("dbc file {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.trace {
            if !p.is_file() {
                problems.push(format!("trace file {} does not exist", p.display()));
            }
        }
        problems
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
        assert_eq!(cfg.model_config(20).seq_len, 100);
    }

    #[test]
    fn optimizer_defaults_follow_kind() {
        let cfg = RunConfig::parse("[train.optimizer]\nkind = \"sgd\"\n").unwrap();
        assert_eq!(cfg.train.optimizer.resolve().learning_rate, 0.01);
        let cfg = RunConfig::parse("[train.optimizer]\nkind = \"adam\"\nlearning_rate = 0.005\n").unwrap();
        assert_eq!(cfg.train.optimizer.resolve().learning_rate, 0.005);
    }

    #[test]
    fn validation_lists_every_problem() {
        let text = r#"
dbc = "/nonexistent/file.dbc"
[data]
rate_hz = -1.0
[model]
threshold = 1.5
[attack]
fgsm_epsilons = [0.2, 0.1]
bim_iterations = 0
[defense]
batch_n = 0
"#;
        let problems = RunConfig::parse(text).unwrap().validate();
        for needle in ["rate_hz", "threshold", "fgsm_epsilons", "bim_iterations", "batch_n", "dbc file"] {
            assert!(problems.iter().any(|p| p.contains(needle)), "{needle} missing from {problems:?}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[model]\nhidden = 3\n").is_err());
    }

    #[test]
    fn seed_override_touches_every_seed() {
        let mut cfg = RunConfig::default();
        cfg.override_seeds(42);
        assert!(cfg.seeds().iter().all(|(_, s)| *s == 42));
    }

    #[test]
    fn explicit_attacks_parse() {
        let text = "[[defense.attacks]]\nkind = \"bim\"\nepsilon = 0.1\nalpha = 0.02\niterations = 5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.defense.attacks[0], AttackConfig::bim(0.1, 0.02, 5));
    }
}
