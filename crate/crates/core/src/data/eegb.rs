//! `eegb-v1`: one UTF-8 JSON header line, then a little-endian `f32`
//! payload laid out trial-major, then channel-major, then sample.
//!
//! ```text
//! {"format":"eegb-v1","n_trials":2,"n_channels":3,"n_samples":1120,"fs_hz":250.0,
//!  "channel_names":["C3","Cz","C4"],"labels":[0,1],"subject_ids":[1,1]}\n
//! <2 * 3 * 1120 * 4 bytes>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::trial::{Label, Trial, TrialSet};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "eegb-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    fs_hz: f64,
    channel_names: Vec<String>,
    labels: Vec<i64>,
    subject_ids: Vec<u32>,
}

pub fn write_trialset(ts: &TrialSet, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.to_string(),
        n_trials: ts.len(),
        n_channels: ts.n_channels(),
        n_samples: ts.n_samples,
        fs_hz: ts.fs_hz,
        channel_names: ts.channel_names.clone(),
        labels: ts.trials.iter().map(|t| t.label.index() as i64).collect(),
        subject_ids: ts.trials.iter().map(|t| t.subject_id).collect(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(ts.len() * ts.n_channels() * ts.n_samples * 4);
    for t in &ts.trials {
        for c in 0..t.channels() {
            for s in 0..t.samples() {
                bytes.extend_from_slice(&(t.at(s, c) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_trialset(path: &Path) -> Result<TrialSet> {
    let bytes = fs::read(path)?;
    let header_err = |reason: String| Error::Header {
        path: path.to_path_buf(),
        reason,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_err("no newline terminating the JSON header".into()))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| header_err(e.to_string()))?;
    let tag = raw
        .get("format")
        .and_then(|v| v.as_str())
        .unwrap_or_default();
    if tag != FORMAT_TAG {
        return Err(Error::UnknownFormat {
            path: path.to_path_buf(),
            tag: tag.to_string(),
        });
    }
    let h: Header = serde_json::from_value(raw).map_err(|e| header_err(e.to_string()))?;
    if h.labels.len() != h.n_trials || h.subject_ids.len() != h.n_trials {
        return Err(header_err(format!(
            "n_trials is {} but there are {} labels and {} subject ids",
            h.n_trials,
            h.labels.len(),
            h.subject_ids.len()
        )));
    }
    if h.channel_names.len() != h.n_channels {
        return Err(header_err(format!(
            "n_channels is {} but {} channel names are listed",
            h.n_channels,
            h.channel_names.len()
        )));
    }
    let payload = &bytes[nl + 1..];
    let expected = h.n_trials * h.n_channels * h.n_samples * 4;
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }

    let (c, s) = (h.n_channels, h.n_samples);
    let mut ts = TrialSet::new(h.fs_hz, h.channel_names, s);
    for (k, chunk) in payload
        .chunks_exact((c * s * 4).max(1))
        .take(h.n_trials)
        .enumerate()
    {
        let mut data = vec![0.0; c * s];
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(b.try_into().expect("4-byte chunk"));
            let (ch, t) = (i / s, i % s);
            data[t * c + ch] = f64::from(v);
        }
        let label = Label::from_index(h.labels[k]).map_err(|e| header_err(e.to_string()))?;
        ts.push(Trial::new(s, c, data, label, h.subject_ids[k])?)?;
    }
    Ok(ts)
}
