use std::io::Write;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::bce_loss;
use super::lstm::{backward_batch, forward, forward_batch};
use super::optim::{OptimizerConfig, OptimizerState};
use super::params::DetectorModel;
use super::NnetError;
use crate::traffic::{Label, SampleWindow};

/// Sequences per forward pass when only predictions are needed.
const EVAL_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch_size: 32, optimizer: OptimizerConfig::default(), shuffle_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = self.optimizer.validate();
        if self.batch_size == 0 {
            problems.push("train.batch_size must be at least 1".into());
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: DetectorModel,
    pub optimizer: OptimizerState,
    pub history: Vec<EpochStats>,
}

pub fn classify(probability: f64, threshold: f64) -> Label {
    if probability >= threshold {
        Label::Attack
    } else {
        Label::Normal
    }
}

/// `Attack` iff the probability reaches the model threshold.
pub fn predict(model: &DetectorModel, x: &ArrayView2<f64>) -> Result<Label, NnetError> {
    let (p, _) = forward(model, x)?;
    Ok(classify(p, model.config.threshold))
}

pub fn predict_proba_arrays(model: &DetectorModel, xs: &[ArrayView2<f64>]) -> Result<Vec<f64>, NnetError> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(EVAL_CHUNK) {
        out.extend(forward_batch(model, chunk)?.probabilities.iter().copied());
    }
    Ok(out)
}

pub fn predict_proba(model: &DetectorModel, windows: &[SampleWindow]) -> Result<Vec<f64>, NnetError> {
    let views: Vec<ArrayView2<f64>> = windows.iter().map(|w| w.x.view()).collect();
    predict_proba_arrays(model, &views)
}

pub fn predict_labels(model: &DetectorModel, windows: &[SampleWindow]) -> Result<Vec<Label>, NnetError> {
    Ok(predict_proba(model, windows)?.into_iter().map(|p| classify(p, model.config.threshold)).collect())
}

/// Mean BCE and accuracy over `windows`.
pub fn evaluate(model: &DetectorModel, windows: &[SampleWindow]) -> Result<(f64, f64), NnetError> {
    if windows.is_empty() {
        return Err(NnetError::Contract("cannot evaluate on an empty set".into()));
    }
    let probs = predict_proba(model, windows)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, w) in probs.iter().zip(windows) {
        loss += bce_loss(*p, w.label.as_f64()).value();
        correct += usize::from(classify(*p, model.config.threshold) == w.label);
    }
    Ok((loss / windows.len() as f64, correct as f64 / windows.len() as f64))
}

/// One pass over `samples` in shuffled mini-batches; each step uses the
/// batch-mean gradient. Returns the running `(loss, accuracy)` measured
/// before each update.
pub fn train_epoch<R: Rng>(
    model: &mut DetectorModel,
    optimizer: &mut OptimizerState,
    samples: &[&SampleWindow],
    batch_size: usize,
    rng: &mut R,
) -> Result<(f64, f64), NnetError> {
    if samples.is_empty() {
        return Err(NnetError::Contract("cannot train on an empty set".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for batch in order.chunks(batch_size.max(1)) {
        let views: Vec<ArrayView2<f64>> = batch.iter().map(|&i| samples[i].x.view()).collect();
        let labels: Vec<f64> = batch.iter().map(|&i| samples[i].label.as_f64()).collect();
        let cache = forward_batch(model, &views)?;
        for (p, &i) in cache.probabilities.iter().zip(batch) {
            loss += bce_loss(*p, samples[i].label.as_f64()).value();
            correct += usize::from(classify(*p, model.config.threshold) == samples[i].label);
        }
        let grads = backward_batch(model, &cache, &labels, 1.0 / batch.len() as f64, true)?;
        optimizer.step(&mut model.params, grads.params.as_ref().expect("requested"));
        if !model.params.is_finite() {
            return Err(NnetError::NonFinite("parameters diverged".into()));
        }
    }
    let n = samples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Train with a fresh optimizer built from `cfg.optimizer`.
pub fn fit(
    model: DetectorModel,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &TrainConfig,
) -> Result<FitOutcome, NnetError> {
    let optimizer = OptimizerState::new(cfg.optimizer.clone(), &model.params);
    fit_with_state(model, optimizer, train, val, cfg)
}

pub fn fit_with_state(
    mut model: DetectorModel,
    mut optimizer: OptimizerState,
    train: &[SampleWindow],
    val: &[SampleWindow],
    cfg: &TrainConfig,
) -> Result<FitOutcome, NnetError> {
    if train.is_empty() || val.is_empty() {
        return Err(NnetError::Contract("training and validation sets must be non-empty".into()));
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(NnetError::Contract(problems.join("; ")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let refs: Vec<&SampleWindow> = train.iter().collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (train_loss, train_acc) = train_epoch(&mut model, &mut optimizer, &refs, cfg.batch_size, &mut rng)?;
        let (val_loss, val_acc) = evaluate(&model, val)?;
        log::info!(
            "epoch {epoch}/{}: loss {train_loss:.5} acc {train_acc:.4} val_loss {val_loss:.5} val_acc {val_acc:.4}",
            cfg.epochs
        );
        history.push(EpochStats { epoch, train_loss, train_acc, val_loss, val_acc });
    }
    Ok(FitOutcome { model, optimizer, history })
}

/// `epoch,train_loss,train_acc,val_loss,val_acc`
pub fn write_history_csv<W: Write>(history: &[EpochStats], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
    for e in history {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_acc.to_string(),
            e.val_loss.to_string(),
            e.val_acc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::optim::OptimizerKind;
    use crate::nnet::params::{init_model, ModelConfig};
    use ndarray::Array2;

    fn toy_set(n: usize, seed: u64) -> Vec<SampleWindow> {
        // Attack windows carry a bump in the middle of signal 0.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Normal } else { Label::Attack };
                let mut x = Array2::from_shape_fn((6, 2), |_| rng.gen_range(0.3..0.4));
                if label == Label::Attack {
                    x[[3, 0]] = rng.gen_range(0.8..1.0);
                }
                SampleWindow { x, start_time: i as f64, rate_hz: 1.0, label, attack_span: None }
            })
            .collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig { input_dim: 2, hidden_dim: 6, seq_len: 6, init_seed: 5, threshold: 0.5 }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let model = init_model(&cfg());
        let tc = TrainConfig { epochs: 0, ..Default::default() };
        let out = fit(model.clone(), &toy_set(8, 0), &toy_set(4, 1), &tc).unwrap();
        assert_eq!(out.model, model);
        assert!(out.history.is_empty());
    }

    #[test]
    fn learns_toy_problem_deterministically() {
        let tc = TrainConfig {
            epochs: 40,
            batch_size: 8,
            optimizer: OptimizerConfig { learning_rate: 0.02, ..OptimizerConfig::new(OptimizerKind::Adam) },
            shuffle_seed: 3,
        };
        let train = toy_set(64, 2);
        let val = toy_set(32, 3);
        let a = fit(init_model(&cfg()), &train, &val, &tc).unwrap();
        let b = fit(init_model(&cfg()), &train, &val, &tc).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 40);
        assert!(a.history.last().unwrap().val_acc >= 0.95, "{:?}", a.history.last());
    }

    #[test]
    fn empty_sets_rejected() {
        let model = init_model(&cfg());
        assert!(fit(model, &[], &toy_set(2, 0), &TrainConfig::default()).is_err());
    }

    #[test]
    fn threshold_boundary() {
        assert_eq!(classify(0.5, 0.5), Label::Attack);
        assert_eq!(classify(0.4999, 0.5), Label::Normal);
        let zero = DetectorModel::zeroed(cfg());
        assert_eq!(predict(&zero, &Array2::zeros((6, 2)).view()).unwrap(), Label::Attack);
    }

    #[test]
    fn raising_output_bias_never_flips_attack_to_normal() {
        let mut model = init_model(&cfg());
        let xs = toy_set(20, 9);
        let before = predict_labels(&model, &xs).unwrap();
        model.params.b_out[0] += 0.75;
        let after = predict_labels(&model, &xs).unwrap();
        for (b, a) in before.iter().zip(&after) {
            if *b == Label::Attack {
                assert_eq!(*a, Label::Attack);
            }
        }
    }

    #[test]
    fn history_csv_header() {
        let mut buf = Vec::new();
        let h = [EpochStats { epoch: 1, train_loss: 0.5, train_acc: 0.75, val_loss: 0.25, val_acc: 1.0 }];
        write_history_csv(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.5,0.75,0.25,1\n");
    }
}
