//! Trial containers, the `eegb-v1` file format, synthetic ERD trials and
//! subject-disjoint splits.

pub mod eegb;
pub mod split;
pub mod synth;
pub mod trial;

pub use eegb::{read_trialset, write_trialset, FORMAT_TAG};
pub use split::split_new_subject;
pub use synth::{generate_synthetic_erd, synth_trial, SynthConfig};
pub use trial::{batch_tensor, Label, Provenance, Trial, TrialSet};
