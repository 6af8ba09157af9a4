//! Signal traces, uniform resampling, sliding windows and dataset splits.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::can_codec::{decode_frame, encode_signals, parse_raw_trace_record, CanFrame, CodecError, SignalCatalog};

pub const DEFAULT_RATE_HZ: f64 = 10.0;
pub const DEFAULT_WINDOW_S: f64 = 10.0;
pub const DEFAULT_STRIDE_S: f64 = 1.0;

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("config: {0}")]
    Config(String),
    #[error("resample: {0}")]
    Resample(String),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Normal = 0,
    Attack = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Attack),
            _ => None,
        }
    }
}

/// Timestamped observations per signal, in catalog feature order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub names: Vec<String>,
    pub observations: Vec<Vec<(f64, f64)>>,
}

impl SignalSeries {
    pub fn empty(catalog: &SignalCatalog) -> Self {
        SignalSeries { names: catalog.signal_names(), observations: vec![Vec::new(); catalog.signal_count()] }
    }

    pub fn signal_count(&self) -> usize {
        self.names.len()
    }

    pub fn total_observations(&self) -> usize {
        self.observations.iter().map(Vec::len).sum()
    }
}

/// Uniform `n × signals` lattice produced by [`resample_series`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrid {
    pub rate_hz: f64,
    pub start_time: f64,
    pub values: Array2<f64>,
}

impl SampleGrid {
    pub fn duration_s(&self) -> f64 {
        self.values.nrows() as f64 / self.rate_hz
    }
}

/// A fixed-length window of `T` timesteps by `signals` columns.
///
/// `attack_span` records `(first timestep, length)` of an injected span.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub x: Array2<f64>,
    pub start_time: f64,
    pub rate_hz: f64,
    pub label: Label,
    pub attack_span: Option<(usize, usize)>,
}

impl SampleWindow {
    pub fn seq_len(&self) -> usize {
        self.x.nrows()
    }

    pub fn signal_count(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleWindow>,
    pub validation: Vec<SampleWindow>,
    pub test: Vec<SampleWindow>,
    pub split_seed: u64,
}

/// Per-signal process parameters in normalized `[0, 1]` units.
struct SignalProcess {
    center: f64,
    walk_bound: f64,
    walk_step: f64,
    sines: [(f64, f64, f64); 2], // (amplitude, period_s, phase)
}

impl SignalProcess {
    fn draw(rng: &mut impl Rng) -> Self {
        let mut sine = || {
            (rng.gen_range(0.02..0.05), rng.gen_range(20.0..300.0), rng.gen_range(0.0..std::f64::consts::TAU))
        };
        let sines = [sine(), sine()];
        SignalProcess {
            center: rng.gen_range(0.1..0.3),
            walk_bound: rng.gen_range(0.03..0.08),
            walk_step: rng.gen_range(0.001..0.004),
            sines,
        }
    }
}

/// Synthetic trace at [`DEFAULT_RATE_HZ`].
pub fn generate_trace(catalog: &SignalCatalog, duration_s: f64, seed: u64) -> Result<SignalSeries, TrafficError> {
    generate_trace_at(catalog, duration_s, DEFAULT_RATE_HZ, seed)
}

/// Synthetic trace: every signal is a slow sum of two sinusoids plus a
/// bounded random walk around a per-signal level, mapped into the signal's
/// physical range and snapped to its DBC quantization. All signals are
/// observed at `k / rate_hz` for `k = 0..duration_s * rate_hz`.
pub fn generate_trace_at(
    catalog: &SignalCatalog,
    duration_s: f64,
    rate_hz: f64,
    seed: u64,
) -> Result<SignalSeries, TrafficError> {
    if !(duration_s > DEFAULT_WINDOW_S) {
        return Err(TrafficError::Config(format!("trace duration must exceed 10 s, got {duration_s}")));
    }
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(TrafficError::Config(format!("rate must be positive, got {rate_hz}")));
    }
    let n = (duration_s * rate_hz + TIME_EPS).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut series = SignalSeries::empty(catalog);
    for (sig, obs) in catalog.signals().zip(series.observations.iter_mut()) {
        let p = SignalProcess::draw(&mut rng);
        let mut walk = 0.0f64;
        obs.reserve(n);
        for k in 0..n {
            let t = k as f64 / rate_hz;
            walk = (walk + rng.gen_range(-p.walk_step..=p.walk_step)).clamp(-p.walk_bound, p.walk_bound);
            let wave: f64 = p
                .sines
                .iter()
                .map(|&(a, period, phase)| a * (std::f64::consts::TAU * t / period + phase).sin())
                .sum();
            let u = (p.center + walk + wave).clamp(0.0, 1.0);
            obs.push((t, sig.quantize(sig.min_phys + u * sig.range())));
        }
    }
    Ok(series)
}

/// Pack a series into CAN frames, one frame per (message, timestamp) at
/// which any of its signals was observed. Frames are ordered by time then id.
pub fn encode_trace(series: &SignalSeries, catalog: &SignalCatalog) -> Result<Vec<CanFrame>, TrafficError> {
    let mut by_key: BTreeMap<(u32, u64), BTreeMap<String, f64>> = BTreeMap::new();
    for (name, obs) in series.names.iter().zip(&series.observations) {
        let (id, _) = catalog.locate(name).ok_or_else(|| CodecError::UnknownSignal(name.clone()))?;
        for &(t, v) in obs {
            if t < 0.0 {
                return Err(TrafficError::Config(format!("negative timestamp {t}")));
            }
            by_key.entry((id, t.to_bits())).or_default().insert(name.clone(), v);
        }
    }
    let mut frames = Vec::with_capacity(by_key.len());
    for ((id, tbits), values) in by_key {
        let msg = catalog.message(id).expect("located message exists");
        frames.push(CanFrame { can_id: id, timestamp: f64::from_bits(tbits), payload: encode_signals(&values, msg)? });
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.can_id.cmp(&b.can_id)));
    Ok(frames)
}

/// Decode frames into a series, skipping (and counting) unknown ids.
pub fn decode_frames(frames: &[CanFrame], catalog: &SignalCatalog) -> (SignalSeries, usize) {
    let mut series = SignalSeries::empty(catalog);
    let mut skipped = 0;
    for frame in frames {
        match decode_frame(frame, catalog) {
            Ok(values) => {
                for (name, v) in values {
                    if let Some(i) = catalog.feature_index(&name) {
                        series.observations[i].push((frame.timestamp, v));
                    }
                }
            }
            Err(_) => skipped += 1,
        }
    }
    for obs in &mut series.observations {
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    (series, skipped)
}

/// Forward-fill every signal onto a uniform grid starting at the earliest
/// observation and ending at the latest.
pub fn resample_series(series: &SignalSeries, rate_hz: f64) -> Result<SampleGrid, TrafficError> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(TrafficError::Config(format!("rate must be positive, got {rate_hz}")));
    }
    let mut t0 = f64::INFINITY;
    let mut t_end = f64::NEG_INFINITY;
    for (name, obs) in series.names.iter().zip(&series.observations) {
        let (Some(first), Some(last)) = (obs.first(), obs.last()) else {
            return Err(TrafficError::Resample(format!("signal {name} has no observations")));
        };
        t0 = t0.min(first.0);
        t_end = t_end.max(last.0);
    }
    if series.names.is_empty() {
        return Err(TrafficError::Resample("series has no signals".into()));
    }
    let n = ((t_end - t0) * rate_hz + TIME_EPS).floor() as usize + 1;
    let mut values = Array2::zeros((n, series.signal_count()));
    for (j, (name, obs)) in series.names.iter().zip(&series.observations).enumerate() {
        if obs[0].0 > t0 + TIME_EPS {
            return Err(TrafficError::Resample(format!(
                "grid point {t0} precedes the first observation of {name} at {}",
                obs[0].0
            )));
        }
        let mut cursor = 0;
        for k in 0..n {
            let t = t0 + k as f64 / rate_hz;
            while cursor + 1 < obs.len() && obs[cursor + 1].0 <= t + TIME_EPS {
                cursor += 1;
            }
            values[[k, j]] = obs[cursor].1;
        }
    }
    Ok(SampleGrid { rate_hz, start_time: t0, values })
}

fn steps(seconds: f64, rate_hz: f64, what: &str) -> Result<usize, TrafficError> {
    let exact = seconds * rate_hz;
    let rounded = exact.round();
    if !(rounded >= 1.0) || (exact - rounded).abs() > 1e-6 {
        return Err(TrafficError::Config(format!(
            "{what} of {seconds} s is not a positive whole number of samples at {rate_hz} Hz"
        )));
    }
    Ok(rounded as usize)
}

/// Number of windows [`build_windows`] yields for a grid of `n` rows.
pub fn window_count(n: usize, window: usize, stride: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / stride + 1
    }
}

/// Cut the grid into Normal-labelled windows of `window_s` every `stride_s`.
pub fn build_windows(grid: &SampleGrid, window_s: f64, stride_s: f64) -> Result<Vec<SampleWindow>, TrafficError> {
    let t = steps(window_s, grid.rate_hz, "window")?;
    let stride = steps(stride_s, grid.rate_hz, "stride")?;
    let n = grid.values.nrows();
    if n < t {
        return Err(TrafficError::Config(format!(
            "grid of {:.3} s is shorter than the {window_s} s window",
            grid.duration_s()
        )));
    }
    Ok((0..window_count(n, t, stride))
        .map(|k| SampleWindow {
            x: grid.values.slice(s![k * stride..k * stride + t, ..]).to_owned(),
            start_time: grid.start_time + (k * stride) as f64 / grid.rate_hz,
            rate_hz: grid.rate_hz,
            label: Label::Normal,
            attack_span: None,
        })
        .collect())
}

/// Sizes `(train, validation, test)` for an 80/10/10 split; the remainder goes
/// to training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = n / 10;
    (n - 2 * held, held, held)
}

/// Seeded shuffle then 80/10/10 partition.
pub fn split_dataset(samples: Vec<SampleWindow>, seed: u64) -> Result<DatasetSplit, TrafficError> {
    if samples.len() < 10 {
        return Err(TrafficError::Config(format!("need at least 10 samples to split, got {}", samples.len())));
    }
    let (n_train, n_val, _) = split_sizes(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<SampleWindow>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<SampleWindow> { idx.iter().map(|&i| slots[i].take().unwrap()).collect() };
    let train = take(&order[..n_train]);
    let validation = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok(DatasetSplit { train, validation, test, split_seed: seed })
}

/// Read a decoded trace CSV with header `timestamp,signal_name,value`.
///
/// Observations sharing a timestamp keep the last row in file order.
pub fn ingest_decoded_csv<R: Read>(reader: R, catalog: &SignalCatalog) -> Result<SignalSeries, TrafficError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["timestamp", "signal_name", "value"] {
        return Err(TrafficError::Ingest(format!("unexpected header {:?}", headers)));
    }
    let mut series = SignalSeries::empty(catalog);
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let bad = |what: &str| TrafficError::Ingest(format!("row {}: invalid {what}", row + 2));
        let t: f64 = record[0].parse().map_err(|_| bad("timestamp"))?;
        let name = &record[1];
        let v: f64 = record[2].parse().map_err(|_| bad("value"))?;
        let i = catalog
            .feature_index(name)
            .ok_or_else(|| TrafficError::Ingest(format!("row {}: unknown signal {name:?}", row + 2)))?;
        series.observations[i].push((t, v));
    }
    for (name, obs) in series.names.iter().zip(series.observations.iter_mut()) {
        // stable: rows with equal timestamps stay in file order
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let before = obs.len();
        let mut deduped: Vec<(f64, f64)> = Vec::with_capacity(before);
        for &o in obs.iter() {
            match deduped.last_mut() {
                Some(last) if last.0 == o.0 => *last = o,
                _ => deduped.push(o),
            }
        }
        if deduped.len() != before {
            log::warn!("{name}: {} duplicate timestamps resolved last-wins", before - deduped.len());
        }
        *obs = deduped;
    }
    Ok(series)
}

/// Write a series as `timestamp,signal_name,value`, ordered by time then
/// feature index.
pub fn write_decoded_csv<W: Write>(series: &SignalSeries, writer: W) -> Result<(), TrafficError> {
    let mut rows: Vec<(f64, usize, f64)> = series
        .observations
        .iter()
        .enumerate()
        .flat_map(|(i, obs)| obs.iter().map(move |&(t, v)| (t, i, v)))
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["timestamp", "signal_name", "value"])?;
    for (t, i, v) in rows {
        w.write_record([t.to_string(), series.names[i].clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Read a raw trace CSV with header `timestamp,can_id_hex,b0,..,b7`.
pub fn read_raw_trace<R: Read>(reader: R) -> Result<Vec<CanFrame>, TrafficError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut frames = Vec::new();
    for record in rdr.records() {
        frames.push(parse_raw_trace_record(&record?)?);
    }
    Ok(frames)
}

pub fn write_raw_trace<W: Write>(frames: &[CanFrame], mut writer: W) -> Result<(), TrafficError> {
    writeln!(writer, "timestamp,can_id_hex,b0,b1,b2,b3,b4,b5,b6,b7")?;
    for f in frames {
        writeln!(writer, "{f}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Min–max scaling of each signal to `[0, 1]` using the catalog's physical
/// ranges. Signals with a zero-width range map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn from_catalog(catalog: &SignalCatalog) -> Self {
        Normalizer {
            min: catalog.signals().map(|s| s.min_phys).collect(),
            max: catalog.signals().map(|s| s.max_phys).collect(),
        }
    }

    fn width(&self, j: usize) -> f64 {
        self.max[j] - self.min[j]
    }

    pub fn normalize(&self, window: &SampleWindow) -> SampleWindow {
        let mut out = window.clone();
        for (j, mut col) in out.x.columns_mut().into_iter().enumerate() {
            let (lo, w) = (self.min[j], self.width(j));
            col.mapv_inplace(|v| if w > 0.0 { (v - lo) / w } else { 0.0 });
        }
        out
    }

    pub fn denormalize(&self, window: &SampleWindow) -> SampleWindow {
        let mut out = window.clone();
        for (j, mut col) in out.x.columns_mut().into_iter().enumerate() {
            let (lo, w) = (self.min[j], self.width(j));
            col.mapv_inplace(|u| lo + u * w);
        }
        out
    }

    pub fn normalize_all(&self, windows: &[SampleWindow]) -> Vec<SampleWindow> {
        windows.iter().map(|w| self.normalize(w)).collect()
    }

    /// A physical-unit budget for signal `j` expressed in normalized units.
    pub fn epsilon_to_normalized(&self, j: usize, eps_physical: f64) -> f64 {
        let w = self.width(j);
        if w > 0.0 {
            eps_physical / w
        } else {
            0.0
        }
    }
}
