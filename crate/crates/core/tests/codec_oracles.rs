mod common;

use std::collections::BTreeMap;

use canguard::can_codec::{decode_frame, encode_signals, parse_dbc, ByteOrder, CanFrame, MessageDef, SignalCatalog, SignalDef};
use common::{bitwise_raw, random_signal};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fields of an `SG_` line read one character at a time:
/// `(name, start, len, little_endian, signed, scale, offset, min, max)`.
fn sg_fields_by_chars(line: &str) -> (String, u32, u32, bool, bool, f64, f64, f64, f64) {
    let body = line.trim_start().strip_prefix("SG_").unwrap();
    let mut fields: Vec<String> = vec![String::new()];
    let mut order_sign = String::new();
    let mut stage = 0; // 0 name, 1 start, 2 len, 3 order/sign, 4 factor, 5 range
    for c in body.chars() {
        match (stage, c) {
            (0, ':') => {
                stage = 1;
                fields.push(String::new());
            }
            (1, '|') => {
                stage = 2;
                fields.push(String::new());
            }
            (2, '@') => stage = 3,
            (3, ' ') if !order_sign.is_empty() => {
                stage = 4;
                fields.push(String::new());
            }
            (3, c) if c != ' ' => order_sign.push(c),
            (4, '(') => {}
            (4, ',') => fields.push(String::new()),
            (4, ')') => {
                stage = 5;
                fields.push(String::new());
            }
            (5, '[') => {}
            (5, '|') => fields.push(String::new()),
            (5, ']') => break,
            (_, ' ') => {}
            (_, c) => fields.last_mut().unwrap().push(c),
        }
    }
    let n = |i: usize| fields[i].parse::<f64>().unwrap();
    let oc: Vec<char> = order_sign.chars().collect();
    (fields[0].clone(), n(1) as u32, n(2) as u32, oc[0] == '1', oc[1] == '-', n(3), n(4), n(5), n(6))
}

fn check_line(sg: &str) {
    let cat = parse_dbc(&format!("BO_ 608 EMS11: 8 EMS\n{sg}\n")).unwrap().catalog;
    let s = cat.signal(0);
    let o = sg_fields_by_chars(sg);
    assert_eq!(s.name, o.0);
    assert_eq!(u32::from(s.start_bit), o.1);
    assert_eq!(u32::from(s.bit_length), o.2);
    assert_eq!(s.byte_order == ByteOrder::LittleEndian, o.3);
    assert_eq!(s.signed, o.4);
    assert_eq!((s.scale, s.offset, s.min_phys, s.max_phys), (o.5, o.6, o.7, o.8));
}

#[test]
fn parser_agrees_with_character_oracle() {
    check_line(" SG_ TQI_ACOR : 0|8@1+ (0.390625,0) [0|99.6] \"\" CLU");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..300 {
        let len = rng.gen_range(1..=16u32);
        let le = rng.gen_bool(0.5);
        let start = if le { rng.gen_range(0..=64 - len) } else { 7 };
        let scale = [0.5, 0.390625, 0.1, 1.0, 0.015625][rng.gen_range(0..5)];
        let offset = [0.0, -48.0, -15.0235, 3.5][rng.gen_range(0..4)];
        let line = format!(
            " SG_ SIG_{i} : {start}|{len}@{}{} ({scale},{offset}) [{}|{}] \"unit\" RX",
            if le { 1 } else { 0 },
            if rng.gen_bool(0.5) { "+" } else { "-" },
            offset,
            offset + scale * 10.0,
        );
        check_line(&line);
    }
}

#[test]
fn decode_matches_bitwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000 {
        let sig = random_signal(&mut rng, "S");
        let cat = SignalCatalog::from_messages(vec![MessageDef { message_id: 1, name: "M".into(), dlc: 8, signals: vec![sig.clone()] }]).unwrap();
        let payload: [u8; 8] = rng.gen();
        let decoded = decode_frame(&CanFrame { can_id: 1, timestamp: 0.0, payload }, &cat).unwrap();
        let raw = bitwise_raw(&sig, &payload);
        assert_eq!(sig.extract_raw(&payload), raw, "case {case}: {sig:?}");
        assert_eq!(decoded[0].1, raw as f64 * sig.scale + sig.offset, "case {case}");
    }
}

/// A message of up to four non-overlapping signals packed from bit 0 upward
/// (Intel) or from byte 0 downward (Motorola).
fn layout_strategy() -> impl Strategy<Value = Vec<SignalDef>> {
    (prop::collection::vec((1u8..=16, any::<bool>(), any::<bool>(), 0usize..4, 0usize..3), 1..=4), any::<bool>()).prop_map(
        |(parts, motorola)| {
            let mut next = 0u32;
            let mut out = Vec::new();
            for (k, (len, signed, _, si, oi)) in parts.into_iter().enumerate() {
                let len = u32::from(len);
                if next + len > 64 {
                    break;
                }
                // Motorola signals laid out in linear msb-first order
                let start = if motorola { (next / 8) * 8 + 7 - next % 8 } else { next };
                out.push(SignalDef {
                    name: format!("S{k}"),
                    start_bit: start as u8,
                    bit_length: len as u8,
                    byte_order: if motorola { ByteOrder::BigEndian } else { ByteOrder::LittleEndian },
                    signed,
                    scale: [1.0, 0.5, 0.390625, 0.1][si],
                    offset: [0.0, -48.0, -15.0235][oi],
                    min_phys: -1e30,
                    max_phys: 1e30,
                });
                next += len;
            }
            out
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn encode_decode_roundtrip(signals in layout_strategy(), seeds in prop::collection::vec(any::<u64>(), 4)) {
        let msg = MessageDef { message_id: 77, name: "M".into(), dlc: 8, signals: signals.clone() };
        let cat = SignalCatalog::from_messages(vec![msg.clone()]).unwrap();
        let mut values = BTreeMap::new();
        for (sig, seed) in signals.iter().zip(&seeds) {
            let (lo, hi) = sig.raw_bounds();
            let raw = lo + (*seed as i128).rem_euclid(hi - lo + 1);
            values.insert(sig.name.clone(), raw as f64 * sig.scale + sig.offset);
        }
        let payload = encode_signals(&values, &msg).unwrap();
        let decoded = decode_frame(&CanFrame { can_id: 77, timestamp: 0.0, payload }, &cat).unwrap();
        for (name, v) in decoded {
            prop_assert_eq!(values[&name], v);
        }
    }
}

#[test]
fn offsets_encode_to_zero_payload() {
    let cat = SignalCatalog::bundled();
    for msg in cat.messages() {
        let values: BTreeMap<String, f64> = msg.signals.iter().map(|s| (s.name.clone(), s.offset)).collect();
        assert_eq!(encode_signals(&values, msg).unwrap(), [0u8; 8], "{}", msg.name);
    }
}

#[test]
fn out_of_width_value_is_rejected() {
    let cat = parse_dbc("BO_ 1 M: 8 E\n SG_ X : 0|8@1+ (1,0) [0|255] \"\"\n").unwrap().catalog;
    let msg = cat.message(1).unwrap();
    let err = encode_signals(&BTreeMap::from([("X".to_string(), 256.0)]), msg).unwrap_err();
    assert!(err.to_string().contains('X'));
}
