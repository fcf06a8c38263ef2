//! Continuous-recording preprocessing: zero-phase Butterworth filtering,
//! causal exponential moving standardization, and cue-locked epoching.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::trial::{Label, Trial};
use crate::error::{Error, Result};

/// Multichannel recording stored as a row-major `[N × C]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousRecording {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub cue_events: Vec<(usize, Label)>,
}

impl ContinuousRecording {
    pub fn new(samples: Vec<f64>, fs: f64, channel_names: Vec<String>) -> Result<Self> {
        if !(fs > 0.0) {
            return Err(Error::Config(format!(
                "sampling rate must be positive, got {fs}"
            )));
        }
        let c = channel_names.len();
        if c == 0 || !samples.len().is_multiple_of(c) {
            return Err(Error::Dimension {
                op: "recording",
                axis: "channels".into(),
                expected: c,
                actual: samples.len(),
            });
        }
        Ok(ContinuousRecording {
            samples,
            fs,
            channel_names,
            cue_events: Vec::new(),
        })
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.n_channels()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples
            .iter()
            .skip(c)
            .step_by(self.n_channels())
            .copied()
            .collect()
    }

    fn map_channels(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let c = self.n_channels();
        let mut out = vec![0.0; self.samples.len()];
        for ch in 0..c {
            for (t, v) in f(&self.channel(ch)).into_iter().enumerate() {
                out[t * c + ch] = v;
            }
        }
        ContinuousRecording {
            samples: out,
            ..self.clone()
        }
    }
}

/// One biquad `[b0, b1, b2, a0 = 1, a1, a2]`.
pub type Section = [f64; 6];

/// Second-order-section IIR filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Section>,
}

fn check_edge(hz: f64, fs: f64) -> Result<()> {
    if !(hz > 0.0 && hz < fs / 2.0) {
        return Err(Error::Config(format!(
            "band edge {hz} Hz must lie strictly between 0 and the Nyquist frequency {} Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

/// Analog prototype poles of an order-`n` Butterworth low-pass.
fn prototype_poles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            Complex64::from_polar(1.0, theta)
        })
        .collect()
}

fn prewarp(hz: f64, fs: f64) -> f64 {
    2.0 * fs * (PI * hz / fs).tan()
}

/// Bilinear transform of an analog zero/pole/gain system. Zeros at
/// infinity land on `z = -1`.
fn bilinear(
    zeros: &[Complex64],
    poles: &[Complex64],
    gain: f64,
    fs: f64,
) -> (Vec<Complex64>, Vec<Complex64>, f64) {
    let fs2 = Complex64::new(2.0 * fs, 0.0);
    let map = |s: &Complex64| (fs2 + s) / (fs2 - s);
    let mut zd: Vec<Complex64> = zeros.iter().map(map).collect();
    zd.resize(poles.len(), Complex64::new(-1.0, 0.0));
    let pd = poles.iter().map(map).collect();
    let num: Complex64 = zeros.iter().map(|z| fs2 - z).product();
    let den: Complex64 = poles.iter().map(|p| fs2 - p).product();
    (zd, pd, gain * (num / den).re)
}

fn poly2(r1: Complex64, r2: Complex64) -> [f64; 3] {
    [1.0, -(r1 + r2).re, (r1 * r2).re]
}

/// Groups conjugate poles and real zeros into biquads; the overall gain
/// goes into the first section.
fn zpk_to_sos(zeros: &[Complex64], poles: &[Complex64], gain: f64) -> Sos {
    let mut upper: Vec<Complex64> = poles.iter().filter(|p| p.im > 1e-12).copied().collect();
    let mut real: Vec<Complex64> = poles
        .iter()
        .filter(|p| p.im.abs() <= 1e-12)
        .copied()
        .collect();
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut pole_pairs: Vec<(Complex64, Complex64)> =
        upper.iter().map(|p| (*p, p.conj())).collect();
    for r in real.chunks(2) {
        pole_pairs.push((r[0], r.get(1).copied().unwrap_or_default()));
    }

    // Odd orders leave one real pole and zero; pad both with the origin,
    // which cancels in the transfer function.
    let mut zs: Vec<f64> = zeros.iter().map(|z| z.re).collect();
    zs.resize(2 * pole_pairs.len(), 0.0);
    zs.sort_by(f64::total_cmp);
    let n = zs.len();

    let sections = pole_pairs
        .iter()
        .enumerate()
        .map(|(i, &(p1, p2))| {
            let a = poly2(p1, p2);
            let (z1, z2) = (zs[i], zs[n - 1 - i]);
            let k = if i == 0 { gain } else { 1.0 };
            [k, -k * (z1 + z2), k * z1 * z2, 1.0, a[1], a[2]]
        })
        .collect();
    Sos { sections }
}

/// Order-`order` digital Butterworth design. `low_hz == 0` designs a
/// low-pass at `high_hz`; otherwise a band-pass (order doubles).
pub fn butterworth(order: usize, low_hz: f64, high_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::Config("filter order must be at least 1".into()));
    }
    check_edge(high_hz, fs)?;
    let proto = prototype_poles(order);
    let (zeros, poles, gain) = if low_hz == 0.0 {
        let wc = prewarp(high_hz, fs);
        let poles: Vec<Complex64> = proto.iter().map(|p| p * wc).collect();
        (Vec::new(), poles, wc.powi(order as i32))
    } else {
        check_edge(low_hz, fs)?;
        if low_hz >= high_hz {
            return Err(Error::Config(format!(
                "band-pass low edge {low_hz} Hz must be below the high edge {high_hz} Hz"
            )));
        }
        let (w1, w2) = (prewarp(low_hz, fs), prewarp(high_hz, fs));
        let (bw, w0) = (w2 - w1, (w1 * w2).sqrt());
        let mut poles = Vec::with_capacity(2 * order);
        for p in &proto {
            let lp = p * (bw / 2.0);
            let root = (lp * lp - w0 * w0).sqrt();
            poles.push(lp + root);
            poles.push(lp - root);
        }
        (
            vec![Complex64::default(); order],
            poles,
            bw.powi(order as i32),
        )
    };
    let (zd, pd, kd) = bilinear(&zeros, &poles, gain, fs);
    Ok(zpk_to_sos(&zd, &pd, kd))
}

impl Sos {
    /// Complex frequency response at `hz`.
    pub fn response(&self, hz: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * hz / fs);
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2))
            .product()
    }

    /// Per-section transposed direct-form II state for a unit step held
    /// forever, scaled by the DC gain of the sections before it.
    fn step_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let g = (s[0] + s[1] + s[2]) / (1.0 + s[4] + s[5]);
                let z2 = s[2] - s[5] * g;
                let z1 = s[1] - s[4] * g + z2;
                let out = [scale * z1, scale * z2];
                scale *= g;
                out
            })
            .collect()
    }

    /// Causal filtering from initial state `zi`.
    pub fn filter(&self, x: &[f64], zi: Option<&[[f64; 2]]>) -> Vec<f64> {
        let mut y = x.to_vec();
        for (k, s) in self.sections.iter().enumerate() {
            let [mut z1, mut z2] = zi.map(|z| z[k]).unwrap_or([0.0, 0.0]);
            for v in y.iter_mut() {
                let xin = *v;
                let out = s[0] * xin + z1;
                z1 = s[1] * xin - s[4] * out + z2;
                z2 = s[2] * xin - s[5] * out;
                *v = out;
            }
        }
        y
    }

    /// Edge padding used by [`Sos::filtfilt`].
    pub fn pad_len(&self) -> usize {
        let zeros_b2 = self.sections.iter().filter(|s| s[2] == 0.0).count();
        let zeros_a2 = self.sections.iter().filter(|s| s[5] == 0.0).count();
        3 * (2 * self.sections.len() + 1 - zeros_b2.min(zeros_a2))
    }

    /// Zero-phase forward-backward filtering with odd-symmetric edge
    /// extension and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        if x.len() <= pad {
            return Err(Error::Config(format!(
                "signal of {} samples is too short for zero-phase filtering (needs more than {pad})",
                x.len()
            )));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |x0: f64| {
            zi.iter()
                .map(|z| [z[0] * x0, z[1] * x0])
                .collect::<Vec<_>>()
        };
        let mut y = self.filter(&ext, Some(&scaled(ext[0])));
        y.reverse();
        let mut y = self.filter(&y, Some(&scaled(y[0])));
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }
}

/// Butterworth order applied forward and backward.
pub const FILTER_ORDER: usize = 4;

/// Zero-phase band-pass per channel (`low_hz == 0` means low-pass only).
pub fn bandpass(x: &ContinuousRecording, low_hz: f64, high_hz: f64) -> Result<ContinuousRecording> {
    let sos = butterworth(FILTER_ORDER, low_hz, high_hz, x.fs)?;
    let mut err = None;
    let out = x.map_channels(|ch| {
        sos.filtfilt(ch).unwrap_or_else(|e| {
            err = Some(e);
            Vec::new()
        })
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardizeConfig {
    pub decay: f64,
    pub eps: f64,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        StandardizeConfig {
            decay: 0.999,
            eps: 1e-4,
        }
    }
}

/// Causal exponential moving standardization per channel:
/// `μ_t = d·μ_{t-1} + (1-d)·x_t`, `v_t = d·v_{t-1} + (1-d)·(x_t - μ_t)²`,
/// output `(x_t - μ_t) / sqrt(max(v_t, eps))`, starting from `μ = x_0`,
/// `v = 0`.
pub fn sliding_standardize(
    x: &ContinuousRecording,
    decay: f64,
    eps: f64,
) -> Result<ContinuousRecording> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Config(format!(
            "decay must lie in (0, 1), got {decay}"
        )));
    }
    Ok(x.map_channels(|ch| standardize_channel(ch, decay, eps)))
}

fn standardize_channel(x: &[f64], decay: f64, eps: f64) -> Vec<f64> {
    let Some(&first) = x.first() else {
        return Vec::new();
    };
    let (mut mean, mut var) = (first, 0.0);
    x.iter()
        .map(|&v| {
            mean = decay * mean + (1.0 - decay) * v;
            let dev = v - mean;
            var = decay * var + (1.0 - decay) * dev * dev;
            dev / var.max(eps).sqrt()
        })
        .collect()
}

/// Epoch window around a cue, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochWindow {
    pub pre_s: f64,
    pub post_s: f64,
}

impl Default for EpochWindow {
    fn default() -> Self {
        EpochWindow {
            pre_s: 0.5,
            post_s: 3.98,
        }
    }
}

impl EpochWindow {
    /// `(pre, post)` sample counts; 125 and 995 at 250 Hz.
    pub fn samples(&self, fs: f64) -> (usize, usize) {
        (
            (self.pre_s * fs).round() as usize,
            (self.post_s * fs).round() as usize,
        )
    }
}

/// Cuts `[cue - pre, cue + post)` and labels it with the cue's class.
pub fn extract_epoch(
    x: &ContinuousRecording,
    cue_index: usize,
    label: Label,
    subject_id: u32,
    window: &EpochWindow,
) -> Result<Trial> {
    let (pre, post) = window.samples(x.fs);
    if cue_index < pre {
        return Err(Error::Epoch(format!(
            "cue at sample {cue_index} leaves fewer than {pre} pre-cue samples"
        )));
    }
    if cue_index + post > x.len() {
        return Err(Error::Epoch(format!(
            "cue at sample {cue_index} needs {post} post-cue samples but the recording ends at {}",
            x.len()
        )));
    }
    let c = x.n_channels();
    let data = x.samples[(cue_index - pre) * c..(cue_index + post) * c].to_vec();
    Trial::new(pre + post, c, data, label, subject_id)
}

/// Epochs every cue event of a recording.
pub fn extract_epochs(
    x: &ContinuousRecording,
    subject_id: u32,
    window: &EpochWindow,
) -> Result<Vec<Trial>> {
    x.cue_events
        .iter()
        .map(|&(cue, label)| extract_epoch(x, cue, label, subject_id, window))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 250.0;

    fn mono(x: Vec<f64>) -> ContinuousRecording {
        ContinuousRecording::new(x, FS, vec!["C3".into()]).unwrap()
    }

    fn ramp_sine() -> Vec<f64> {
        (0..40)
            .map(|n| (0.3 * n as f64).sin() + 0.1 * n as f64)
            .collect()
    }

    // Reference outputs of a widely used scientific library's
    // `sosfiltfilt(butter(4, ..., fs=250))` on `sin(0.3n) + 0.1n`.
    #[test]
    fn filtfilt_matches_reference_bandpass() {
        let sos = butterworth(4, 4.0, 38.0, FS).unwrap();
        let y = sos.filtfilt(&ramp_sine()).unwrap();
        let want = [
            (0, -0.0486644459624318),
            (7, 0.6540142488997825),
            (20, -0.5011766700989551),
            (39, 0.15348451190675583),
        ];
        for (i, v) in want {
            assert!((y[i] - v).abs() < 1e-9, "y[{i}] = {} vs {v}", y[i]);
        }
    }

    #[test]
    fn filtfilt_matches_reference_lowpass() {
        let sos = butterworth(4, 0.0, 38.0, FS).unwrap();
        let y = sos.filtfilt(&ramp_sine()).unwrap();
        let want = [
            (0, -2.1350446576362536e-04),
            (7, 1.5631408719050197),
            (20, 1.7205494217683772),
            (39, 3.1372488324925505),
        ];
        for (i, v) in want {
            assert!((y[i] - v).abs() < 1e-9, "y[{i}] = {} vs {v}", y[i]);
        }
    }

    #[test]
    fn butterworth_gain_is_half_power_at_the_edges() {
        let sos = butterworth(4, 4.0, 38.0, FS).unwrap();
        for f in [4.0, 38.0] {
            let g = sos.response(f, FS).norm();
            assert!(
                (g - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9,
                "|H({f})| = {g}"
            );
        }
        assert!(sos.response(0.0, FS).norm() < 1e-12);
        let lp = butterworth(4, 0.0, 38.0, FS).unwrap();
        assert!((lp.response(0.0, FS).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_bands_are_configuration_errors() {
        let x = mono(vec![0.0; 500]);
        assert!(matches!(bandpass(&x, 4.0, 125.0), Err(Error::Config(_))));
        assert!(matches!(bandpass(&x, 40.0, 38.0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_input_standardizes_to_zero() {
        let x = mono(vec![3.7; 2000]);
        let y = sliding_standardize(&x, 0.999, 1e-4).unwrap();
        assert!(y.samples[1000..].iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn epoch_window_bounds() {
        let x = mono(vec![0.0; 5000]);
        let w = EpochWindow::default();
        assert_eq!(w.samples(FS), (125, 995));
        let t = extract_epoch(&x, 1000, Label::Left, 1, &w).unwrap();
        assert_eq!(t.samples(), 1120);
        assert!(matches!(
            extract_epoch(&x, 100, Label::Left, 1, &w),
            Err(Error::Epoch(_))
        ));
        assert!(matches!(
            extract_epoch(&x, 4500, Label::Left, 1, &w),
            Err(Error::Epoch(_))
        ));
    }
}
