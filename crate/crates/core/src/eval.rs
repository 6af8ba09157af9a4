//! Detection metrics, optimizer comparison tables and curve emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{fit, init_model, predict_labels, EpochStats, ModelConfig, NnetError, OptimizerConfig, TrainConfig};
use crate::traffic::{Label, SampleWindow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    Empty,
    #[error("invalid request: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] NnetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Binary detection metrics with Attack as the positive class. The macro
/// fields average the per-class figures of both classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub wall_time_s: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let neg_precision = ratio(tn, tn + fn_);
        let neg_recall = ratio(tn, tn + fp);
        let macro_precision = (precision + neg_precision) / 2.0;
        let macro_recall = (recall + neg_recall) / 2.0;
        MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
            precision,
            recall,
            f1: f1_score(precision, recall),
            macro_precision,
            macro_recall,
            macro_f1: (f1_score(precision, recall) + f1_score(neg_precision, neg_recall)) / 2.0,
            wall_time_s: 0.0,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn metrics_from_labels(predicted: &[Label], truth: &[Label]) -> Result<MetricsReport, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Config(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Label::Attack, Label::Attack) => tp += 1,
            (Label::Attack, Label::Normal) => fp += 1,
            (Label::Normal, Label::Normal) => tn += 1,
            (Label::Normal, Label::Attack) => fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, tn, fn_))
}

pub fn compute_metrics(model: &crate::nnet::DetectorModel, dataset: &[SampleWindow]) -> Result<MetricsReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let predicted = predict_labels(model, dataset)?;
    let truth: Vec<Label> = dataset.iter().map(|w| w.label).collect();
    metrics_from_labels(&predicted, &truth)
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub optimizer: OptimizerConfig,
    pub metrics: MetricsReport,
    pub history: Vec<EpochStats>,
    pub model: crate::nnet::DetectorModel,
}

/// Train one model per optimizer from the same initialization and report
/// test metrics. `wall_time_s` covers `fit` only.
pub fn optimizer_comparison(
    train: &[SampleWindow],
    val: &[SampleWindow],
    test: &[SampleWindow],
    optimizers: &[OptimizerConfig],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<Vec<ComparisonRow>, EvalError> {
    if optimizers.is_empty() {
        return Err(EvalError::Config("no optimizers to compare".into()));
    }
    let mut rows = Vec::with_capacity(optimizers.len());
    for opt in optimizers {
        let cfg = TrainConfig { optimizer: opt.clone(), ..train_cfg.clone() };
        log::info!("training with {}", opt.kind);
        let start = Instant::now();
        let outcome = fit(init_model(model_cfg), train, val, &cfg)?;
        let elapsed = start.elapsed().as_secs_f64();
        let mut metrics = compute_metrics(&outcome.model, test)?;
        metrics.wall_time_s = elapsed;
        rows.push(ComparisonRow { optimizer: opt.clone(), metrics, history: outcome.history, model: outcome.model });
    }
    Ok(rows)
}

/// `optimizer,accuracy,recall,precision,f1,time_s` followed by the macro
/// columns and the confusion counts.
pub fn write_table_csv<W: Write>(rows: &[ComparisonRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "optimizer",
        "accuracy",
        "recall",
        "precision",
        "f1",
        "time_s",
        "macro_recall",
        "macro_precision",
        "macro_f1",
        "tp",
        "fp",
        "tn",
        "fn",
    ])?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.optimizer.kind.to_string(),
            m.accuracy.to_string(),
            m.recall.to_string(),
            m.precision.to_string(),
            m.f1.to_string(),
            format!("{:.3}", m.wall_time_s),
            m.macro_recall.to_string(),
            m.macro_precision.to_string(),
            m.macro_f1.to_string(),
            m.tp.to_string(),
            m.fp.to_string(),
            m.tn.to_string(),
            m.fn_.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, EvalError> {
    File::create(path).map(BufWriter::new).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

/// Write `history.csv` (full history), `accuracy.csv` and `loss.csv` into
/// `dir`, returning the paths written.
pub fn emit_curves(history: &[EpochStats], dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if history.is_empty() {
        return Err(EvalError::Empty);
    }
    let full = dir.join("history.csv");
    crate::nnet::write_history_csv(history, create(&full)?)?;

    let acc = dir.join("accuracy.csv");
    let mut w = csv::Writer::from_writer(create(&acc)?);
    w.write_record(["epoch", "train_acc", "val_acc"])?;
    for e in history {
        w.write_record([e.epoch.to_string(), e.train_acc.to_string(), e.val_acc.to_string()])?;
    }
    w.flush().map_err(|source| EvalError::Io { path: acc.clone(), source })?;

    let loss = dir.join("loss.csv");
    let mut w = csv::Writer::from_writer(create(&loss)?);
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in history {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string()])?;
    }
    w.flush().map_err(|source| EvalError::Io { path: loss.clone(), source })?;
    Ok(vec![full, acc, loss])
}
