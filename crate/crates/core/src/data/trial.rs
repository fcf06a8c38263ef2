use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Imagined hand. The discriminant is the class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Left = 0,
    Right = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: i64) -> Result<Self> {
        match i {
            0 => Ok(Label::Left),
            1 => Ok(Label::Right),
            other => Err(Error::Config(format!(
                "label {other} is not 0 (left) or 1 (right)"
            ))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Left => Label::Right,
            Label::Right => Label::Left,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Mirror,
}

/// One cue-aligned epoch stored as a row-major `[T × C]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    samples: usize,
    channels: usize,
    data: Vec<f64>,
    pub label: Label,
    pub subject_id: u32,
    pub provenance: Provenance,
}

impl Trial {
    pub fn new(
        samples: usize,
        channels: usize,
        data: Vec<f64>,
        label: Label,
        subject_id: u32,
    ) -> Result<Self> {
        if data.len() != samples * channels {
            return Err(Error::Dimension {
                op: "trial",
                axis: "samples x channels".into(),
                expected: samples * channels,
                actual: data.len(),
            });
        }
        Ok(Trial {
            samples,
            channels,
            data,
            label,
            subject_id,
            provenance: Provenance::Original,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.channels + c]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.samples).map(|t| self.at(t, c)).collect()
    }
}

/// A labelled collection of trials sharing one montage and sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub fs_hz: f64,
    pub channel_names: Vec<String>,
    pub n_samples: usize,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(fs_hz: f64, channel_names: Vec<String>, n_samples: usize) -> Self {
        TrialSet {
            fs_hz,
            channel_names,
            n_samples,
            trials: Vec::new(),
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn push(&mut self, trial: Trial) -> Result<()> {
        if trial.samples() != self.n_samples || trial.channels() != self.n_channels() {
            return Err(Error::Dimension {
                op: "trialset",
                axis: "trial shape".into(),
                expected: self.n_samples * self.n_channels(),
                actual: trial.samples() * trial.channels(),
            });
        }
        self.trials.push(trial);
        Ok(())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn with_trials(&self, trials: Vec<Trial>) -> Self {
        TrialSet {
            fs_hz: self.fs_hz,
            channel_names: self.channel_names.clone(),
            n_samples: self.n_samples,
            trials,
        }
    }
}

/// Stacks trials into a model input `[B, 1, T, C]`.
pub fn batch_tensor<'a, I>(trials: I) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Trial>,
{
    let mut data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut b = 0;
    for t in trials {
        match dims {
            None => dims = Some((t.samples(), t.channels())),
            Some(d) if d != (t.samples(), t.channels()) => {
                return Err(Error::Dimension {
                    op: "batch_tensor",
                    axis: "trial shape".into(),
                    expected: d.0 * d.1,
                    actual: t.samples() * t.channels(),
                })
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        b += 1;
    }
    let (s, c) = dims.unwrap_or((0, 0));
    Tensor::new(vec![b, 1, s, c], data)
}
