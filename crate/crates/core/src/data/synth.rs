//! Synthetic three-channel motor-imagery trials: Gaussian noise plus a mu
//! rhythm whose amplitude drops after the cue over the hemisphere
//! contralateral to the imagined hand.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::trial::{Label, Trial, TrialSet};
use crate::error::{Error, Result};

pub const CHANNELS: [&str; 3] = ["C3", "Cz", "C4"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub fs: f64,
    pub n_samples: usize,
    pub cue_sample: usize,
    pub mu_freq_hz: f64,
    pub mu_amp: f64,
    pub erd_attenuation: f64,
    pub noise_std: f64,
    /// Trials of each class generated for every subject.
    pub n_trials_per_class: usize,
    pub n_subjects: u32,
    /// Relative spread of each subject's mu amplitude (uniform ±).
    pub subject_amp_jitter: f64,
    /// Relative spread of each subject's lateral and midline channel gains.
    pub channel_gain_jitter: f64,
    /// Supplied by the caller rather than the serialized form, so that one
    /// run-level seed drives every random stream.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            fs: 250.0,
            n_samples: 1120,
            cue_sample: 125,
            mu_freq_hz: 10.0,
            mu_amp: 1.0,
            erd_attenuation: 0.5,
            noise_std: 1.0,
            n_trials_per_class: 200,
            n_subjects: 9,
            subject_amp_jitter: 0.3,
            channel_gain_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fs > 0.0) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        if self.cue_sample >= self.n_samples {
            return bad(format!(
                "cue_sample {} must precede n_samples {}",
                self.cue_sample, self.n_samples
            ));
        }
        if !(self.erd_attenuation > 0.0 && self.erd_attenuation < 1.0) {
            return bad(format!(
                "erd_attenuation must lie in (0, 1), got {}",
                self.erd_attenuation
            ));
        }
        if self.noise_std < 0.0 || self.mu_amp < 0.0 {
            return bad("noise_std and mu_amp must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.subject_amp_jitter)
            || !(0.0..1.0).contains(&self.channel_gain_jitter)
        {
            return bad("jitter fractions must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Per-subject multiplicative perturbations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubjectProfile {
    pub mu_gain: f64,
    /// Shared by C3 and C4 so the montage stays left/right symmetric.
    pub lateral_gain: f64,
    pub midline_gain: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn subject_profile(cfg: &SynthConfig, subject: u32) -> SubjectProfile {
    let mut rng = stream_rng(cfg.seed, (u64::from(subject) << 32) | 0xFFFF_FFFF);
    let mut jitter = |spread: f64| 1.0 + spread * (2.0 * rng.gen::<f64>() - 1.0);
    SubjectProfile {
        mu_gain: jitter(cfg.subject_amp_jitter),
        lateral_gain: jitter(cfg.channel_gain_jitter),
        midline_gain: jitter(cfg.channel_gain_jitter),
    }
}

/// One trial drawn from the random stream `(subject, trial_seed)`. The
/// right-hand trial of a stream is the left-hand trial with C3 and C4
/// exchanged.
pub fn synth_trial(
    cfg: &SynthConfig,
    subject: u32,
    label: Label,
    trial_seed: u32,
) -> Result<Trial> {
    cfg.validate()?;
    let profile = subject_profile(cfg, subject);
    let mut rng = stream_rng(cfg.seed, (u64::from(subject) << 32) | u64::from(trial_seed));
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let phases: [f64; 3] = std::array::from_fn(|_| 2.0 * PI * rng.gen::<f64>());
    let gains = [
        profile.lateral_gain,
        profile.midline_gain,
        profile.lateral_gain,
    ];
    let amp = cfg.mu_amp * profile.mu_gain;
    let w = 2.0 * PI * cfg.mu_freq_hz / cfg.fs;

    // Left-hand layout: the right hemisphere (C4) desynchronizes.
    let (n, c) = (cfg.n_samples, CHANNELS.len());
    let mut data = vec![0.0; n * c];
    for t in 0..n {
        for ch in 0..c {
            let erd = if ch == 2 && t >= cfg.cue_sample {
                cfg.erd_attenuation
            } else {
                1.0
            };
            let mu = amp * erd * (w * t as f64 + phases[ch]).sin();
            data[t * c + ch] = gains[ch] * (mu + noise.sample(&mut rng));
        }
    }
    if label == Label::Right {
        for row in data.chunks_mut(c) {
            row.swap(0, 2);
        }
    }
    Trial::new(n, c, data, label, subject)
}

/// `n_trials_per_class` left and right trials for each subject `1..=n_subjects`,
/// interleaved left/right. Left trial `k` uses stream `2k`, right uses `2k + 1`.
pub fn generate_synthetic_erd(cfg: &SynthConfig) -> Result<TrialSet> {
    cfg.validate()?;
    let names = CHANNELS.iter().map(|s| s.to_string()).collect();
    let mut ts = TrialSet::new(cfg.fs, names, cfg.n_samples);
    for subject in 1..=cfg.n_subjects {
        for k in 0..cfg.n_trials_per_class as u32 {
            ts.push(synth_trial(cfg, subject, Label::Left, 2 * k)?)?;
            ts.push(synth_trial(cfg, subject, Label::Right, 2 * k + 1)?)?;
        }
    }
    Ok(ts)
}
