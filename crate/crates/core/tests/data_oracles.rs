mod common;

use canguard::can_codec::SignalCatalog;
use canguard::eval::metrics_from_labels;
use canguard::fdia::{inject_fdia, FdiaConfig};
use canguard::traffic::{Label, SampleWindow};
use common::confusion_counts;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A 10 s window at 10 Hz holding each signal at a fixed fraction of its range.
fn constant_window(catalog: &SignalCatalog, frac: f64) -> SampleWindow {
    let row: Vec<f64> = catalog.signals().map(|s| s.min_phys + frac * (s.max_phys - s.min_phys)).collect();
    let x = Array2::from_shape_fn((100, row.len()), |(_, j)| row[j]);
    SampleWindow { x, start_time: 0.0, rate_hz: 10.0, label: Label::Normal, attack_span: None }
}

#[test]
fn fdia_values_are_uniform_over_the_signal_range() {
    let catalog = SignalCatalog::bundled();
    let clean = constant_window(&catalog, 0.2);
    let cfg = FdiaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = catalog.signal_count();
    let (mut sum, mut sumsq) = (vec![0.0; d], vec![0.0; d]);
    let mut n = 0usize;
    for _ in 0..500 {
        let w = inject_fdia(&clean, &catalog, &cfg, &mut rng).unwrap();
        let (start, len) = w.attack_span.unwrap();
        assert_eq!(len, 10);
        assert_eq!(w.label, Label::Attack);
        for t in 0..100 {
            let inside = t >= start && t < start + len;
            for j in 0..d {
                let (lo, hi) = (catalog.signal(j).min_phys, catalog.signal(j).max_phys);
                let v = w.x[[t, j]];
                if !inside {
                    assert_eq!(v, clean.x[[t, j]], "outside the span must be untouched");
                    continue;
                }
                assert!(v >= lo && v <= hi);
                let u = (v - lo) / (hi - lo);
                sum[j] += u;
                sumsq[j] += u * u;
            }
            if inside {
                n += 1;
            }
        }
    }
    // U(0, 1) after rescaling: mean 1/2, variance 1/12. Allow 4 standard errors.
    let n = n as f64;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = sumsq[j] / n - mean * mean;
        let se_mean = (1.0f64 / 12.0 / n).sqrt();
        let se_var = (1.0f64 / 180.0 / n).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se_mean, "{}: mean {mean}", catalog.signal(j).name);
        assert!((var - 1.0 / 12.0).abs() < 4.0 * se_var, "{}: var {var}", catalog.signal(j).name);
    }
}

#[test]
fn fdia_span_start_covers_every_position() {
    let catalog = SignalCatalog::bundled();
    let clean = constant_window(&catalog, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = [false; 91];
    for _ in 0..2000 {
        let (start, _) = inject_fdia(&clean, &catalog, &FdiaConfig::default(), &mut rng).unwrap().attack_span.unwrap();
        seen[start] = true;
    }
    assert!(seen.iter().all(|&s| s), "some span starts never drawn");
}

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Normal), Just(Label::Attack)]
}

proptest! {
    #[test]
    fn metrics_agree_with_brute_force(pairs in prop::collection::vec((label(), label()), 1..200)) {
        let (pred, truth): (Vec<Label>, Vec<Label>) = pairs.into_iter().unzip();
        let m = metrics_from_labels(&pred, &truth).unwrap();
        let (tp, fp, tn, fn_) = confusion_counts(&pred, &truth);
        prop_assert_eq!((m.tp, m.fp, m.tn, m.fn_), (tp, fp, tn, fn_));

        let (tp, fp, tn, fn_) = (tp as f64, fp as f64, tn as f64, fn_ as f64);
        prop_assert!((m.accuracy - (tp + tn) / pred.len() as f64).abs() < 1e-12);
        if tp + fp > 0.0 && tp + fn_ > 0.0 {
            let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
            prop_assert!((m.precision - p).abs() < 1e-12);
            prop_assert!((m.recall - r).abs() < 1e-12);
            if p + r > 0.0 {
                prop_assert!((m.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }
}
