use std::f64::consts::PI;

use mclswt::data::Label;
use mclswt::signal::{
    bandpass, extract_epoch, sliding_standardize, ContinuousRecording, EpochWindow,
};
use mclswt::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const FS: f64 = 250.0;

fn names(c: usize) -> Vec<String> {
    ["C3", "Cz", "C4"][..c]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn single(x: Vec<f64>) -> ContinuousRecording {
    ContinuousRecording::new(x, FS, names(1)).unwrap()
}

fn sine(hz: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (2.0 * PI * hz * i as f64 / FS).sin())
        .collect()
}

/// Amplitude of the `hz` component by direct projection onto the DFT basis
/// over a whole number of periods.
fn amplitude(x: &[f64], hz: f64) -> f64 {
    let n = x.len() as f64;
    let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, v)| {
        let w = 2.0 * PI * hz * i as f64 / FS;
        (re + v * w.cos(), im - v * w.sin())
    });
    2.0 * (re * re + im * im).sqrt() / n
}

fn db(ratio: f64) -> f64 {
    20.0 * ratio.log10()
}

fn variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

#[test]
fn passband_sine_keeps_its_amplitude() {
    // 5000 samples hold exactly 200 periods of 10 Hz; edges are trimmed to
    // a whole number of periods as well.
    let y = bandpass(&single(sine(10.0, 5000)), 4.0, 38.0)
        .unwrap()
        .channel(0);
    let gain = amplitude(&y[500..4500], 10.0);
    assert!(db(gain).abs() <= 1.0, "10 Hz gain {:.3} dB", db(gain));
}

#[test]
fn stopband_sine_is_attenuated() {
    let y = bandpass(&single(sine(50.0, 5000)), 4.0, 38.0)
        .unwrap()
        .channel(0);
    let gain = amplitude(&y[500..4500], 50.0);
    assert!(db(gain) <= -20.0, "50 Hz gain {:.3} dB", db(gain));
}

#[test]
fn dc_offset_is_removed() {
    let y = bandpass(&single(vec![5.0; 5000]), 4.0, 38.0)
        .unwrap()
        .channel(0);
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    assert!(mean.abs() < 0.05, "mean {mean}");
}

#[test]
fn lowpass_keeps_dc() {
    let y = bandpass(&single(vec![5.0; 2000]), 0.0, 38.0)
        .unwrap()
        .channel(0);
    assert!(y[200..1800].iter().all(|v| (v - 5.0).abs() < 1e-6));
}

#[test]
fn bandpass_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x: Vec<f64> = (0..3000).map(|_| normal.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..3000).map(|_| normal.sample(&mut rng)).collect();
    let (a, b) = (2.5, -0.75);
    let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
    let fx = bandpass(&single(x), 4.0, 38.0).unwrap().channel(0);
    let fy = bandpass(&single(y), 4.0, 38.0).unwrap().channel(0);
    let fm = bandpass(&single(mix), 4.0, 38.0).unwrap().channel(0);
    for i in 0..fm.len() {
        assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
    }
}

#[test]
fn bandpass_filters_channels_independently_and_keeps_length() {
    let n = 1500;
    let a = sine(10.0, n);
    let b = sine(20.0, n);
    let mut both = Vec::with_capacity(2 * n);
    for i in 0..n {
        both.extend([a[i], b[i]]);
    }
    let rec = ContinuousRecording::new(both, FS, names(2)).unwrap();
    let out = bandpass(&rec, 4.0, 38.0).unwrap();
    assert_eq!(out.len(), n);
    assert_eq!(
        out.channel(0),
        bandpass(&single(a), 4.0, 38.0).unwrap().channel(0)
    );
    assert_eq!(
        out.channel(1),
        bandpass(&single(b), 4.0, 38.0).unwrap().channel(0)
    );
}

#[test]
fn nyquist_edge_is_a_configuration_error() {
    let err = bandpass(&single(vec![0.0; 100]), 4.0, 125.0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn standardize_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = Normal::new(1.0, 3.0).unwrap();
    let x: Vec<f64> = (0..4000).map(|_| normal.sample(&mut rng)).collect();
    let full = sliding_standardize(&single(x.clone()), 0.999, 1e-4)
        .unwrap()
        .channel(0);
    for cut in [1, 10, 777, 2500] {
        let prefix = sliding_standardize(&single(x[..cut].to_vec()), 0.999, 1e-4)
            .unwrap()
            .channel(0);
        assert_eq!(prefix[..], full[..cut]);
    }
}

#[test]
fn white_noise_standardizes_to_unit_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let normal = Normal::new(3.0, 7.0).unwrap();
    let x: Vec<f64> = (0..60_000).map(|_| normal.sample(&mut rng)).collect();
    let y = sliding_standardize(&single(x), 0.999, 1e-4)
        .unwrap()
        .channel(0);
    let v = variance(&y[10_000..]);
    assert!((0.8..=1.2).contains(&v), "variance {v}");
}

#[test]
fn scale_step_is_recovered_within_five_thousand_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let half = 20_000;
    let x: Vec<f64> = (0..2 * half)
        .map(|i| normal.sample(&mut rng) * if i < half { 1.0 } else { 10.0 })
        .collect();
    let y = sliding_standardize(&single(x), 0.999, 1e-4)
        .unwrap()
        .channel(0);
    let settled = &y[half + 5000..half + 10_000];
    let v = variance(settled);
    assert!((0.8..=1.2).contains(&v), "variance after the step {v}");
}

#[test]
fn epoch_at_cue_1000_spans_875_to_1995() {
    let n = 3000;
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let rec = single(x);
    let t = extract_epoch(&rec, 1000, Label::Right, 4, &EpochWindow::default()).unwrap();
    assert_eq!(t.samples(), 1120);
    assert_eq!(t.channel(0).first(), Some(&875.0));
    assert_eq!(t.channel(0).last(), Some(&1994.0));
    assert_eq!(t.label, Label::Right);
    assert_eq!(t.subject_id, 4);
}

#[test]
fn epoch_too_close_to_the_start_is_an_error() {
    let rec = single(vec![0.0; 3000]);
    let err = extract_epoch(&rec, 100, Label::Left, 1, &EpochWindow::default()).unwrap_err();
    assert!(matches!(err, Error::Epoch(_)));
}

#[test]
fn two_cues_give_two_equal_length_trials() {
    let rec = single((0..5000).map(|i| i as f64).collect());
    let w = EpochWindow::default();
    let a = extract_epoch(&rec, 500, Label::Left, 1, &w).unwrap();
    let b = extract_epoch(&rec, 2500, Label::Right, 1, &w).unwrap();
    assert_eq!(a.samples(), b.samples());
    assert_ne!(a.label, b.label);
    assert!(a.channel(0).last().unwrap() < b.channel(0).first().unwrap());
}
