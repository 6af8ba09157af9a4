//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls the code paths it is used to check.

#![allow(dead_code)]

use canguard::can_codec::{ByteOrder, SignalDef};
use canguard::nnet::{bce_loss, forward, DetectorModel};
use canguard::traffic::Label;
use ndarray::Array2;
use rand::Rng;

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// LSTM probability by explicit scalar loops over timesteps, units and
/// inputs, reading weights straight from the IFGO row blocks.
pub fn scalar_lstm_probability(model: &DetectorModel, x: &Array2<f64>) -> f64 {
    let p = &model.params;
    let h = model.config.hidden_dim;
    let d = model.config.input_dim;
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    for t in 0..x.nrows() {
        let mut pre = vec![[0.0f64; 4]; h];
        for (j, pj) in pre.iter_mut().enumerate() {
            for (g, v) in pj.iter_mut().enumerate() {
                let row = g * h + j;
                let mut acc = p.bias[row];
                for k in 0..d {
                    acc += p.w_in[[row, k]] * x[[t, k]];
                }
                for k in 0..h {
                    acc += p.w_rec[[row, k]] * hs[k];
                }
                *v = acc;
            }
        }
        for j in 0..h {
            let i_gate = sig(pre[j][0]);
            let f_gate = sig(pre[j][1]);
            let g_cand = pre[j][2].tanh();
            let o_gate = sig(pre[j][3]);
            cs[j] = f_gate * cs[j] + i_gate * g_cand;
            hs[j] = o_gate * cs[j].tanh();
        }
    }
    let mut z = p.b_out[0];
    for j in 0..h {
        z += p.w_out[j] * hs[j];
    }
    sig(z)
}

pub fn loss_at(model: &DetectorModel, x: &Array2<f64>, label: f64) -> f64 {
    let (p, _) = forward(model, &x.view()).expect("forward");
    bce_loss(p, label).value()
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central differences of the BCE loss with respect to every parameter and
/// every input entry.
pub fn finite_difference_gradients(model: &DetectorModel, x: &Array2<f64>, label: f64, step: f64) -> (Vec<f64>, Array2<f64>) {
    let mut m = model.clone();
    let mut dparams = Vec::with_capacity(m.params.len());
    for i in 0..m.params.len() {
        let orig = m.params.get(i);
        m.params.set(i, orig + step);
        let up = loss_at(&m, x, label);
        m.params.set(i, orig - step);
        let down = loss_at(&m, x, label);
        m.params.set(i, orig);
        dparams.push((up - down) / (2.0 * step));
    }
    let mut xs = x.clone();
    let mut dx = Array2::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = xs[idx];
        xs[idx] = orig + step;
        let up = loss_at(model, &xs, label);
        xs[idx] = orig - step;
        let down = loss_at(model, &xs, label);
        xs[idx] = orig;
        dx[idx] = (up - down) / (2.0 * step);
    }
    (dparams, dx)
}

/// Walk the signal's bits one at a time, MSB first, following the DBC bit
/// numbering, and accumulate the raw count.
pub fn bitwise_raw(sig: &SignalDef, payload: &[u8; 8]) -> i64 {
    let bit = |pos: u32| -> u64 { u64::from((payload[(pos / 8) as usize] >> (pos % 8)) & 1) };
    let len = u32::from(sig.bit_length);
    let mut positions = Vec::with_capacity(len as usize);
    match sig.byte_order {
        ByteOrder::LittleEndian => {
            // LSB at start_bit, ascending; collect MSB first
            for k in (0..len).rev() {
                positions.push(u32::from(sig.start_bit) + k);
            }
        }
        ByteOrder::BigEndian => {
            // MSB at start_bit; move toward bit 0 of the byte, then to bit 7
            // of the next byte
            let mut pos = u32::from(sig.start_bit);
            for _ in 0..len {
                positions.push(pos);
                if pos % 8 == 0 {
                    pos += 15;
                } else {
                    pos -= 1;
                }
            }
        }
    }
    let mut raw: u128 = 0;
    for p in positions {
        raw = (raw << 1) | u128::from(bit(p));
    }
    if sig.signed && (raw >> (len - 1)) & 1 == 1 {
        (raw as i128 - (1i128 << len)) as i64
    } else {
        raw as u64 as i64
    }
}

/// Whether a Motorola layout stays inside 8 bytes.
pub fn big_endian_fits(start_bit: u32, len: u32) -> bool {
    let mut pos = start_bit;
    for k in 0..len {
        if pos > 63 {
            return false;
        }
        if k + 1 < len {
            if pos % 8 == 0 {
                pos += 15;
            } else {
                pos -= 1;
            }
        }
    }
    true
}

/// Confusion counts by brute force: `(tp, fp, tn, fn)` with Attack positive.
pub fn confusion_counts(pred: &[Label], truth: &[Label]) -> (usize, usize, usize, usize) {
    let count = |p: Label, t: Label| pred.iter().zip(truth).filter(|(a, b)| **a == p && **b == t).count();
    (
        count(Label::Attack, Label::Attack),
        count(Label::Attack, Label::Normal),
        count(Label::Normal, Label::Normal),
        count(Label::Normal, Label::Attack),
    )
}

/// A random signal layout that fits in 8 bytes, with ranges wide enough that
/// every raw count is in range.
pub fn random_signal(rng: &mut impl Rng, name: &str) -> SignalDef {
    loop {
        let len = rng.gen_range(1..=64u32);
        let le = rng.gen_bool(0.5);
        let start = rng.gen_range(0..64u32);
        let ok = if le { start + len <= 64 } else { big_endian_fits(start, len) };
        if ok {
            return SignalDef {
                name: name.to_string(),
                start_bit: start as u8,
                bit_length: len as u8,
                byte_order: if le { ByteOrder::LittleEndian } else { ByteOrder::BigEndian },
                signed: rng.gen_bool(0.5),
                scale: [1.0, 0.5, 0.25, 0.1, 2.0][rng.gen_range(0..5)],
                offset: [0.0, -40.0, 7.5][rng.gen_range(0..3)],
                min_phys: -1e30,
                max_phys: 1e30,
            };
        }
    }
}
