//! End-to-end dataset preparation and the on-disk window container.
//!
//! Window file layout (little-endian throughout):
//!
//! | size      | field                                             |
//! |-----------|---------------------------------------------------|
//! | 8         | magic `CGWIN\0\0\0`                               |
//! | 4         | version (`u32`, currently 1)                      |
//! | 8         | window count `N` (`u64`)                          |
//! | 4         | timesteps `T` (`u32`)                             |
//! | 4         | signal count `S` (`u32`)                          |
//! | S × (2+n) | signal names: `u16` byte length then UTF-8 bytes  |
//! | N × rec   | window records                                    |
//!
//! Each record is `label` (`u8`, 0 Normal / 1 Attack), `start_time` (`f64`),
//! `rate_hz` (`f64`), `has_span` (`u8`), `span_start` (`u32`), `span_len`
//! (`u32`), then `T·S` values (`f64`, row-major: timestep-major, signal-minor).
//! Span fields are zero when `has_span` is 0.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::AttackConfig;
use crate::can_codec::SignalCatalog;
use crate::fdia::{craft_attack_dataset_seeded, FdiaConfig, FdiaError};
use crate::traffic::{
    build_windows, generate_trace_at, resample_series, split_dataset, DatasetSplit, Label, Normalizer, SampleWindow,
    SignalSeries, TrafficError, DEFAULT_RATE_HZ, DEFAULT_STRIDE_S, DEFAULT_WINDOW_S,
};

pub const MAGIC: [u8; 8] = *b"CGWIN\0\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Fdia(#[from] FdiaError),
    #[error("window file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Everything needed to turn a trace into labelled, normalized splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub duration_s: f64,
    pub rate_hz: f64,
    pub window_s: f64,
    pub stride_s: f64,
    pub trace_seed: u64,
    pub split_seed: u64,
    pub fdia: FdiaConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            duration_s: 1903.0,
            rate_hz: DEFAULT_RATE_HZ,
            window_s: DEFAULT_WINDOW_S,
            stride_s: DEFAULT_STRIDE_S,
            trace_seed: 0,
            split_seed: 0,
            fdia: FdiaConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.duration_s > self.window_s) {
            problems.push(format!("data.duration_s ({}) must exceed data.window_s ({})", self.duration_s, self.window_s));
        }
        if !(self.rate_hz > 0.0) || !self.rate_hz.is_finite() {
            problems.push(format!("data.rate_hz must be positive, got {}", self.rate_hz));
        }
        if !(self.window_s > 0.0) {
            problems.push(format!("data.window_s must be positive, got {}", self.window_s));
        }
        if !(self.stride_s > 0.0) {
            problems.push(format!("data.stride_s must be positive, got {}", self.stride_s));
        }
        problems.extend(self.fdia.validate());
        problems
    }

    /// Timesteps per window.
    pub fn seq_len(&self) -> usize {
        (self.window_s * self.rate_hz).round() as usize
    }
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    /// Normalized splits.
    pub split: DatasetSplit,
    pub normalizer: Normalizer,
    pub total_windows: usize,
    pub attacked_windows: usize,
}

/// Resample, window, inject FDIA in physical units, normalize, then split.
pub fn prepare_dataset(
    catalog: &SignalCatalog,
    series: &SignalSeries,
    cfg: &DataConfig,
) -> Result<PreparedDataset, DatasetError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(TrafficError::Config(problems.join("; ")).into());
    }
    let grid = resample_series(series, cfg.rate_hz)?;
    let windows = build_windows(&grid, cfg.window_s, cfg.stride_s)?;
    let crafted = craft_attack_dataset_seeded(&windows, catalog, &cfg.fdia)?;
    let attacked_windows = crafted.iter().filter(|w| w.label == Label::Attack).count();
    let normalizer = Normalizer::from_catalog(catalog);
    let total_windows = crafted.len();
    let split = split_dataset(normalizer.normalize_all(&crafted), cfg.split_seed)?;
    Ok(PreparedDataset { split, normalizer, total_windows, attacked_windows })
}

/// [`prepare_dataset`] on a freshly generated synthetic trace.
pub fn synthetic_dataset(catalog: &SignalCatalog, cfg: &DataConfig) -> Result<PreparedDataset, DatasetError> {
    let series = generate_trace_at(catalog, cfg.duration_s, cfg.rate_hz, cfg.trace_seed)?;
    prepare_dataset(catalog, &series, cfg)
}

fn format_err(msg: impl Into<String>) -> DatasetError {
    DatasetError::Format(msg.into())
}

pub fn write_windows<W: Write>(windows: &[SampleWindow], signal_names: &[String], mut w: W) -> Result<(), DatasetError> {
    let (t, s) = windows.first().map_or((0, signal_names.len()), |x| x.x.dim());
    if s != signal_names.len() {
        return Err(format_err(format!("{} signal names for {s} columns", signal_names.len())));
    }
    if windows.iter().any(|x| x.x.dim() != (t, s)) {
        return Err(format_err("windows differ in shape"));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| format_err(format!("{v} does not fit in u32")));
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(windows.len() as u64).to_le_bytes())?;
    w.write_all(&to_u32(t)?.to_le_bytes())?;
    w.write_all(&to_u32(s)?.to_le_bytes())?;
    for name in signal_names {
        let len = u16::try_from(name.len()).map_err(|_| format_err(format!("signal name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    let mut buf = Vec::with_capacity(34 + 8 * t * s);
    for win in windows {
        buf.clear();
        buf.push(win.label as u8);
        buf.extend_from_slice(&win.start_time.to_le_bytes());
        buf.extend_from_slice(&win.rate_hz.to_le_bytes());
        let (has, start, len) = match win.attack_span {
            Some((a, b)) => (1u8, to_u32(a)?, to_u32(b)?),
            None => (0, 0, 0),
        };
        buf.push(has);
        buf.extend_from_slice(&start.to_le_bytes());
        buf.extend_from_slice(&len.to_le_bytes());
        for v in win.x.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DatasetError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Returns the windows and the stored signal names.
pub fn read_windows<R: Read>(mut r: R) -> Result<(Vec<SampleWindow>, Vec<String>), DatasetError> {
    if read_bytes::<8>(&mut r)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = u32::from_le_bytes(read_bytes(&mut r)?);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(read_bytes(&mut r)?) as usize;
    let t = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
    let s = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
    let mut names = Vec::with_capacity(s);
    for _ in 0..s {
        let len = u16::from_le_bytes(read_bytes(&mut r)?) as usize;
        let mut raw = vec![0u8; len];
        r.read_exact(&mut raw)?;
        names.push(String::from_utf8(raw).map_err(|_| format_err("signal name is not UTF-8"))?);
    }
    let mut windows = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let [label] = read_bytes::<1>(&mut r)?;
        let label = Label::from_u8(label).ok_or_else(|| format_err(format!("window {i}: bad label {label}")))?;
        let start_time = f64::from_le_bytes(read_bytes(&mut r)?);
        let rate_hz = f64::from_le_bytes(read_bytes(&mut r)?);
        let [has] = read_bytes::<1>(&mut r)?;
        let start = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let len = u32::from_le_bytes(read_bytes(&mut r)?) as usize;
        let attack_span = match has {
            0 => None,
            1 => Some((start, len)),
            other => return Err(format_err(format!("window {i}: bad span flag {other}"))),
        };
        let mut values = Vec::with_capacity(t * s);
        for _ in 0..t * s {
            values.push(f64::from_le_bytes(read_bytes(&mut r)?));
        }
        let x = Array2::from_shape_vec((t, s), values).expect("length matches shape");
        windows.push(SampleWindow { x, start_time, rate_hz, label, attack_span });
    }
    Ok((windows, names))
}

/// Sidecar written next to a persisted adversarial window file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackProvenance {
    pub attack: AttackConfig,
    pub seed: u64,
    /// Window file the clean inputs came from.
    pub source: String,
    /// Checkpoint the gradients were taken from.
    pub model: String,
}

impl AttackProvenance {
    pub fn to_json(&self) -> Result<String, DatasetError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::split_sizes;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("S{i}")).collect()
    }

    fn window(i: usize, span: Option<(usize, usize)>) -> SampleWindow {
        SampleWindow {
            x: Array2::from_shape_fn((4, 3), |(t, s)| (i * 100 + t * 10 + s) as f64 / 7.0),
            start_time: i as f64 + 0.5,
            rate_hz: 10.0,
            label: if span.is_some() { Label::Attack } else { Label::Normal },
            attack_span: span,
        }
    }

    #[test]
    fn window_file_roundtrip_and_layout() {
        let ws = vec![window(0, None), window(1, Some((1, 2)))];
        let mut buf = Vec::new();
        write_windows(&ws, &names(3), &mut buf).unwrap();
        let header = 8 + 4 + 8 + 4 + 4 + 3 * (2 + 2);
        let record = 1 + 8 + 8 + 1 + 4 + 4 + 8 * 12;
        assert_eq!(buf.len(), header + 2 * record);
        assert_eq!(&buf[..8], b"CGWIN\0\0\0");
        // second record's first value: x[0][0] of window 1
        let off = header + record + 26;
        assert_eq!(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()), ws[1].x[[0, 0]]);
        let (back, n) = read_windows(buf.as_slice()).unwrap();
        assert_eq!(back, ws);
        assert_eq!(n, names(3));
    }

    #[test]
    fn window_file_rejects_corruption() {
        let mut buf = Vec::new();
        write_windows(&[window(0, None)], &names(3), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(read_windows(bad.as_slice()).is_err());
        assert!(read_windows(&buf[..buf.len() - 1]).is_err());
        assert!(write_windows(&[window(0, None)], &names(2), Vec::new()).is_err());
    }

    #[test]
    fn empty_file_roundtrip() {
        let mut buf = Vec::new();
        write_windows(&[], &names(2), &mut buf).unwrap();
        let (back, n) = read_windows(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(n.len(), 2);
    }

    #[test]
    fn synthetic_dataset_has_expected_shape() {
        let cat = SignalCatalog::bundled();
        let cfg = DataConfig { duration_s: 120.0, ..Default::default() };
        let ds = synthetic_dataset(&cat, &cfg).unwrap();
        assert_eq!(ds.total_windows, 111);
        assert_eq!(ds.attacked_windows, 56);
        let (a, b, c) = split_sizes(111);
        assert_eq!((ds.split.train.len(), ds.split.validation.len(), ds.split.test.len()), (a, b, c));
        for w in ds.split.train.iter().chain(&ds.split.test) {
            assert_eq!(w.x.dim(), (100, 20));
            assert!(w.x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let again = synthetic_dataset(&cat, &cfg).unwrap();
        assert_eq!(again.split, ds.split);
    }

    #[test]
    fn provenance_json_roundtrip() {
        let p = AttackProvenance { attack: AttackConfig::bim(0.1, 0.02, 5), seed: 4, source: "test.bin".into(), model: "m.ckpt".into() };
        assert_eq!(AttackProvenance::from_json(&p.to_json().unwrap()).unwrap(), p);
    }
}
