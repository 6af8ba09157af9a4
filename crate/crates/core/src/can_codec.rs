//! DBC-subset parsing and CAN frame decoding.
//!
//! Only `BO_` (message) and `SG_` (signal) statements are understood. Every
//! other statement is skipped and counted in [`ParseReport::skipped_lines`].
//! Bit numbering follows the usual DBC convention: for `@1` (Intel) the start
//! bit is the least significant bit and positions ascend; for `@0` (Motorola)
//! the start bit is the most significant bit in sawtooth numbering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A bundled 20-signal catalog modelled on the brake-related KIA ECUs
/// (EMS11/12/14/16 and SAS11).
pub const BUNDLED_DBC: &str = include_str!("../data/kia_subset.dbc");

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("catalog: {0}")]
    Catalog(String),
    #[error("invalid hexadecimal CAN id {0:?}")]
    BadHex(String),
    #[error("unknown message id {0}")]
    UnknownMessage(u32),
    #[error("unknown signal {0:?}")]
    UnknownSignal(String),
    #[error("signal {name}: value {value} is not representable (raw {raw})")]
    Encode { name: String, value: f64, raw: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteOrder {
    LittleEndian,
    BigEndian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalDef {
    pub name: String,
    pub start_bit: u8,
    pub bit_length: u8,
    pub byte_order: ByteOrder,
    pub signed: bool,
    pub scale: f64,
    pub offset: f64,
    pub min_phys: f64,
    pub max_phys: f64,
}

impl SignalDef {
    /// Bit positions occupied by this signal, in the linear numbering of its
    /// byte-order family (Intel: `byte*8 + bit`; Motorola: `byte*8 + 7 - bit`).
    fn linear_span(&self) -> Result<(u32, u32), String> {
        let len = u32::from(self.bit_length);
        let start = u32::from(self.start_bit);
        if len == 0 || len > 64 {
            return Err(format!("{}: bit length {} outside 1..=64", self.name, len));
        }
        if start > 63 {
            return Err(format!("{}: start bit {} outside 0..=63", self.name, start));
        }
        let lo = match self.byte_order {
            ByteOrder::LittleEndian => start,
            ByteOrder::BigEndian => (start / 8) * 8 + 7 - start % 8,
        };
        let hi = lo + len - 1;
        if hi > 63 {
            return Err(format!(
                "{}: {} bits from start bit {} exceed the 64-bit payload",
                self.name, len, start
            ));
        }
        Ok((lo, hi))
    }

    fn validate(&self) -> Result<(), String> {
        self.linear_span()?;
        if self.scale == 0.0 || !self.scale.is_finite() {
            return Err(format!("{}: scale must be finite and nonzero", self.name));
        }
        if !(self.min_phys <= self.max_phys) {
            return Err(format!("{}: min {} > max {}", self.name, self.min_phys, self.max_phys));
        }
        Ok(())
    }

    /// Inclusive raw-count range representable in the bit width.
    pub fn raw_bounds(&self) -> (i128, i128) {
        let len = u32::from(self.bit_length);
        if self.signed {
            (-(1i128 << (len - 1)), (1i128 << (len - 1)) - 1)
        } else {
            (0, (1i128 << len) - 1)
        }
    }

    fn mask(&self) -> u64 {
        if self.bit_length >= 64 {
            u64::MAX
        } else {
            (1u64 << self.bit_length) - 1
        }
    }

    /// Extract the raw (unscaled) count from a payload.
    pub fn extract_raw(&self, payload: &[u8; 8]) -> i64 {
        let bits = match self.byte_order {
            ByteOrder::LittleEndian => u64::from_le_bytes(*payload) >> self.start_bit,
            ByteOrder::BigEndian => {
                let start = u32::from(self.start_bit);
                let msb = (start / 8) * 8 + 7 - start % 8;
                let lsb = msb + u32::from(self.bit_length) - 1;
                u64::from_be_bytes(*payload) >> (63 - lsb)
            }
        } & self.mask();
        if self.signed && self.bit_length < 64 && bits >> (self.bit_length - 1) & 1 == 1 {
            (bits | !self.mask()) as i64
        } else {
            bits as i64
        }
    }

    fn insert_raw(&self, payload: &mut [u8; 8], raw: i64) {
        let bits = raw as u64 & self.mask();
        match self.byte_order {
            ByteOrder::LittleEndian => {
                let mut word = u64::from_le_bytes(*payload);
                word &= !(self.mask() << self.start_bit);
                word |= bits << self.start_bit;
                *payload = word.to_le_bytes();
            }
            ByteOrder::BigEndian => {
                let start = u32::from(self.start_bit);
                let msb = (start / 8) * 8 + 7 - start % 8;
                let shift = 63 - (msb + u32::from(self.bit_length) - 1);
                let mut word = u64::from_be_bytes(*payload);
                word &= !(self.mask() << shift);
                word |= bits << shift;
                *payload = word.to_be_bytes();
            }
        }
    }

    pub fn raw_to_physical(&self, raw: i64) -> f64 {
        raw as f64 * self.scale + self.offset
    }

    /// Nearest raw count for a physical value, or `None` when it falls
    /// outside the bit width.
    pub fn physical_to_raw(&self, value: f64) -> Option<i64> {
        let raw = ((value - self.offset) / self.scale).round();
        let (lo, hi) = self.raw_bounds();
        if !raw.is_finite() || raw < lo as f64 || raw > hi as f64 {
            return None;
        }
        Some(raw as i64)
    }

    /// Snap a physical value onto the signal's quantization lattice, staying
    /// inside both `[min_phys, max_phys]` and the raw range.
    pub fn quantize(&self, value: f64) -> f64 {
        let (lo, hi) = self.raw_bounds();
        let clamped = value.clamp(self.min_phys, self.max_phys);
        let mut raw = ((clamped - self.offset) / self.scale).round().clamp(lo as f64, hi as f64) as i64;
        // rounding can step just outside the physical range
        let step = if self.scale > 0.0 { 1 } else { -1 };
        while self.raw_to_physical(raw) > self.max_phys && (raw - step) as i128 >= lo {
            raw -= step;
        }
        while self.raw_to_physical(raw) < self.min_phys && ((raw + step) as i128) <= hi {
            raw += step;
        }
        self.raw_to_physical(raw)
    }

    pub fn range(&self) -> f64 {
        self.max_phys - self.min_phys
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageDef {
    pub message_id: u32,
    pub name: String,
    pub dlc: u8,
    pub signals: Vec<SignalDef>,
}

impl MessageDef {
    fn validate(&self) -> Result<(), String> {
        if self.dlc > 8 {
            return Err(format!("message {}: dlc {} exceeds 8", self.name, self.dlc));
        }
        let mut used_le = 0u64;
        let mut used_be = 0u64;
        for sig in &self.signals {
            sig.validate()?;
            let (lo, hi) = sig.linear_span()?;
            let span_mask = if hi - lo == 63 { u64::MAX } else { ((1u64 << (hi - lo + 1)) - 1) << lo };
            let used = match sig.byte_order {
                ByteOrder::LittleEndian => &mut used_le,
                ByteOrder::BigEndian => &mut used_be,
            };
            if *used & span_mask != 0 {
                return Err(format!("message {}: signal {} overlaps another signal", self.name, sig.name));
            }
            *used |= span_mask;
        }
        Ok(())
    }
}

/// Parsed catalog of messages and signals.
///
/// Signal order is the order of appearance in the source text; that order is
/// the feature order used everywhere downstream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalCatalog {
    messages: BTreeMap<u32, MessageDef>,
    /// `(message_id, position within message)` in feature order.
    order: Vec<(u32, usize)>,
    index: BTreeMap<String, usize>,
}

impl SignalCatalog {
    pub fn from_messages(messages: Vec<MessageDef>) -> Result<Self, CodecError> {
        let mut catalog = SignalCatalog::default();
        for msg in messages {
            catalog.insert_message(msg)?;
        }
        Ok(catalog)
    }

    fn insert_message(&mut self, msg: MessageDef) -> Result<(), CodecError> {
        msg.validate().map_err(CodecError::Catalog)?;
        if self.messages.contains_key(&msg.message_id) {
            return Err(CodecError::Catalog(format!("duplicate message id {}", msg.message_id)));
        }
        for (pos, sig) in msg.signals.iter().enumerate() {
            if self.index.contains_key(&sig.name) {
                return Err(CodecError::Catalog(format!("duplicate signal name {}", sig.name)));
            }
            self.index.insert(sig.name.clone(), self.order.len());
            self.order.push((msg.message_id, pos));
        }
        self.messages.insert(msg.message_id, msg);
        Ok(())
    }

    /// The bundled 20-signal catalog.
    pub fn bundled() -> Self {
        parse_dbc(BUNDLED_DBC).expect("bundled DBC is valid").catalog
    }

    pub fn messages(&self) -> impl Iterator<Item = &MessageDef> {
        self.messages.values()
    }

    pub fn message(&self, id: u32) -> Option<&MessageDef> {
        self.messages.get(&id)
    }

    pub fn message_count(&self) -> usize {
        self.messages.len()
    }

    pub fn signal_count(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Signals in feature order.
    pub fn signals(&self) -> impl Iterator<Item = &SignalDef> + '_ {
        self.order.iter().map(|&(id, pos)| &self.messages[&id].signals[pos])
    }

    pub fn signal(&self, feature: usize) -> &SignalDef {
        let (id, pos) = self.order[feature];
        &self.messages[&id].signals[pos]
    }

    pub fn signal_names(&self) -> Vec<String> {
        self.signals().map(|s| s.name.clone()).collect()
    }

    /// Feature index of a signal name.
    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Message id and position for a signal name.
    pub fn locate(&self, name: &str) -> Option<(u32, usize)> {
        self.feature_index(name).map(|i| self.order[i])
    }

    /// Sub-catalog holding only the named signals, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Self, CodecError> {
        let mut grouped: BTreeMap<u32, Vec<SignalDef>> = BTreeMap::new();
        for name in names {
            let (id, pos) = self.locate(name).ok_or_else(|| CodecError::UnknownSignal(name.to_string()))?;
            grouped.entry(id).or_default().push(self.messages[&id].signals[pos].clone());
        }
        let mut out = SignalCatalog::default();
        for (id, signals) in grouped {
            let msg = &self.messages[&id];
            out.messages.insert(
                id,
                MessageDef { message_id: id, name: msg.name.clone(), dlc: msg.dlc, signals },
            );
        }
        for name in names {
            let id = self.locate(name).map(|l| l.0).unwrap_or_default();
            let pos = out.messages[&id].signals.iter().position(|s| s.name == *name).unwrap_or_default();
            if out.index.insert(name.to_string(), out.order.len()).is_some() {
                return Err(CodecError::Catalog(format!("duplicate signal name {name}")));
            }
            out.order.push((id, pos));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseReport {
    pub catalog: SignalCatalog,
    /// Non-blank lines that were not `BO_`/`SG_` statements (or were
    /// multiplexed signals, which are not supported).
    pub skipped_lines: usize,
}

fn parse_err(line: usize, msg: impl Into<String>) -> CodecError {
    CodecError::Parse { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T, CodecError> {
    s.trim().parse::<T>().map_err(|_| parse_err(line, format!("invalid {what} {s:?}")))
}

/// `BO_ <id> <name>: <dlc> <sender>`
fn parse_message(line_no: usize, rest: &str) -> Result<MessageDef, CodecError> {
    let (head, tail) = rest
        .split_once(':')
        .ok_or_else(|| parse_err(line_no, "BO_ statement missing ':'"))?;
    let mut head_it = head.split_whitespace();
    let id: u32 = parse_num(line_no, "message id", head_it.next().unwrap_or(""))?;
    let name = head_it
        .next()
        .ok_or_else(|| parse_err(line_no, "BO_ statement missing message name"))?
        .to_string();
    if head_it.next().is_some() {
        return Err(parse_err(line_no, "unexpected token before ':' in BO_ statement"));
    }
    let dlc: u8 = parse_num(line_no, "dlc", tail.split_whitespace().next().unwrap_or(""))?;
    Ok(MessageDef { message_id: id, name, dlc, signals: Vec::new() })
}

/// `SG_ <name> [mux] : <start>|<len>@<order><sign> (<scale>,<offset>) [<min>|<max>] "<unit>" <receivers>`
///
/// Returns `Ok(None)` for multiplexed signals.
fn parse_signal(line_no: usize, rest: &str) -> Result<Option<SignalDef>, CodecError> {
    let (head, tail) = rest
        .split_once(':')
        .ok_or_else(|| parse_err(line_no, "SG_ statement missing ':'"))?;
    let mut head_it = head.split_whitespace();
    let name = head_it
        .next()
        .ok_or_else(|| parse_err(line_no, "SG_ statement missing signal name"))?
        .to_string();
    if head_it.next().is_some() {
        return Ok(None);
    }
    let tail = tail.trim_start();

    let (layout, tail) = tail
        .split_once(char::is_whitespace)
        .ok_or_else(|| parse_err(line_no, "SG_ statement truncated after bit layout"))?;
    let (start, rest_layout) = layout
        .split_once('|')
        .ok_or_else(|| parse_err(line_no, format!("bad bit layout {layout:?}")))?;
    let (len, order_sign) = rest_layout
        .split_once('@')
        .ok_or_else(|| parse_err(line_no, format!("bad bit layout {layout:?}")))?;
    let start_bit: u8 = parse_num(line_no, "start bit", start)?;
    let bit_length: u8 = parse_num(line_no, "bit length", len)?;
    let mut os = order_sign.chars();
    let byte_order = match os.next() {
        Some('1') => ByteOrder::LittleEndian,
        Some('0') => ByteOrder::BigEndian,
        _ => return Err(parse_err(line_no, format!("bad byte order in {layout:?}"))),
    };
    let signed = match os.next() {
        Some('+') => false,
        Some('-') => true,
        _ => return Err(parse_err(line_no, format!("bad sign marker in {layout:?}"))),
    };
    if os.next().is_some() {
        return Err(parse_err(line_no, format!("trailing characters in {layout:?}")));
    }

    let tail = tail.trim_start();
    let inner = tail
        .strip_prefix('(')
        .and_then(|t| t.split_once(')'))
        .ok_or_else(|| parse_err(line_no, "missing (scale,offset)"))?;
    let (factor, tail) = inner;
    let (scale, offset) = factor
        .split_once(',')
        .ok_or_else(|| parse_err(line_no, "malformed (scale,offset)"))?;
    let scale: f64 = parse_num(line_no, "scale", scale)?;
    let offset: f64 = parse_num(line_no, "offset", offset)?;

    let (range, _) = tail
        .trim_start()
        .strip_prefix('[')
        .and_then(|t| t.split_once(']'))
        .ok_or_else(|| parse_err(line_no, "missing [min|max]"))?;
    let (min, max) = range
        .split_once('|')
        .ok_or_else(|| parse_err(line_no, "malformed [min|max]"))?;
    let min_phys: f64 = parse_num(line_no, "minimum", min)?;
    let max_phys: f64 = parse_num(line_no, "maximum", max)?;

    let sig = SignalDef { name, start_bit, bit_length, byte_order, signed, scale, offset, min_phys, max_phys };
    sig.validate().map_err(|m| parse_err(line_no, m))?;
    Ok(Some(sig))
}

/// Parse a DBC-subset document.
pub fn parse_dbc(text: &str) -> Result<ParseReport, CodecError> {
    let mut messages: Vec<MessageDef> = Vec::new();
    let mut skipped = 0usize;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("BO_ ") {
            messages.push(parse_message(line_no, rest)?);
        } else if let Some(rest) = line.strip_prefix("SG_ ") {
            let msg = messages
                .last_mut()
                .ok_or_else(|| parse_err(line_no, "SG_ statement before any BO_ statement"))?;
            match parse_signal(line_no, rest)? {
                Some(sig) => msg.signals.push(sig),
                None => skipped += 1,
            }
        } else {
            skipped += 1;
        }
    }
    Ok(ParseReport { catalog: SignalCatalog::from_messages(messages)?, skipped_lines: skipped })
}

/// Convert a hexadecimal CAN id (optional `0x` prefix) to its decimal message id.
pub fn cid_to_mid(cid_hex: &str) -> Result<u32, CodecError> {
    let t = cid_hex.trim();
    let digits = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_hexdigit()) {
        return Err(CodecError::BadHex(cid_hex.to_string()));
    }
    u32::from_str_radix(digits, 16).map_err(|_| CodecError::BadHex(cid_hex.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanFrame {
    pub can_id: u32,
    pub timestamp: f64,
    pub payload: [u8; 8],
}

impl fmt::Display for CanFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6},{:X}", self.timestamp, self.can_id)?;
        for b in self.payload {
            write!(f, ",{b:02X}")?;
        }
        Ok(())
    }
}

/// Decode every signal of the frame's message into physical values.
pub fn decode_frame(frame: &CanFrame, catalog: &SignalCatalog) -> Result<Vec<(String, f64)>, CodecError> {
    let msg = catalog.message(frame.can_id).ok_or(CodecError::UnknownMessage(frame.can_id))?;
    Ok(msg
        .signals
        .iter()
        .map(|s| (s.name.clone(), s.raw_to_physical(s.extract_raw(&frame.payload))))
        .collect())
}

/// Pack physical values into a payload. Signals of `message` absent from
/// `values` are encoded as raw zero.
pub fn encode_signals(values: &BTreeMap<String, f64>, message: &MessageDef) -> Result<[u8; 8], CodecError> {
    for name in values.keys() {
        if !message.signals.iter().any(|s| &s.name == name) {
            return Err(CodecError::UnknownSignal(name.clone()));
        }
    }
    let mut payload = [0u8; 8];
    for sig in &message.signals {
        if let Some(&value) = values.get(&sig.name) {
            let raw = sig.physical_to_raw(value).ok_or_else(|| CodecError::Encode {
                name: sig.name.clone(),
                value,
                raw: (value - sig.offset) / sig.scale,
            })?;
            sig.insert_raw(&mut payload, raw);
        }
    }
    Ok(payload)
}

/// One line of a raw trace CSV: `timestamp,can_id_hex,b0,..,b7`.
pub fn parse_raw_trace_record(record: &csv::StringRecord) -> Result<CanFrame, CodecError> {
    let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
    if record.len() != 10 {
        return Err(parse_err(line, format!("expected 10 columns, found {}", record.len())));
    }
    let timestamp: f64 = parse_num(line, "timestamp", &record[0])?;
    let can_id = cid_to_mid(&record[1])?;
    let mut payload = [0u8; 8];
    for (k, byte) in payload.iter_mut().enumerate() {
        let s = record[2 + k].trim();
        let s = s.strip_prefix("0x").unwrap_or(s);
        *byte = u8::from_str_radix(s, 16).map_err(|_| parse_err(line, format!("invalid byte {s:?}")))?;
    }
    Ok(CanFrame { can_id, timestamp, payload })
}
