//! Run configuration: one JSON document covering every subcommand, with
//! one command-line flag per leaf key.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mclswt::data::SynthConfig;
use mclswt::model::SwtConfig;
use mclswt::signal::StandardizeConfig;
use mclswt::train::{SweepGrid, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "MCLSWT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    /// Drives data synthesis, parameter initialization and shuffling.
    pub seed: u64,
    pub model: SwtConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub mirror: MirrorConfig,
    pub split: SplitConfig,
    pub bench: BenchConfig,
    pub sweep: SweepGrid,
    pub gradcheck: GradcheckConfig,
    pub paths: PathsConfig,
}

/// Band-pass filtering and sliding standardization of each trial before
/// training or evaluation. Off by default: synthetic trials need neither.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub enabled: bool,
    /// 0 for a low-pass filter.
    pub low_hz: f64,
    pub high_hz: f64,
    pub standardize: bool,
    pub decay: f64,
    pub eps: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let s = StandardizeConfig::default();
        PreprocessConfig {
            enabled: false,
            low_hz: 4.0,
            high_hz: 38.0,
            standardize: true,
            decay: s.decay,
            eps: s.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MirrorConfig {
    /// Left/right channel name pairs; every other channel stays in place.
    pub pairs: Vec<(String, String)>,
}

impl Default for MirrorConfig {
    fn default() -> Self {
        MirrorConfig {
            pairs: vec![("C3".into(), "C4".into())],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_subjects: (1..=6).collect(),
            test_subjects: (7..=9).collect(),
        }
    }
}

impl SplitConfig {
    pub fn sets(&self) -> (BTreeSet<u32>, BTreeSet<u32>) {
        (
            self.train_subjects.iter().copied().collect(),
            self.test_subjects.iter().copied().collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Trials per timed inference pass.
    pub batch: usize,
    pub n_runs: usize,
    /// Sequence lengths for the attention scaling measurement.
    pub lens: Vec<usize>,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 1,
            n_runs: 1000,
            lens: vec![1096, 2192, 4384],
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Number of random seeds for the per-op and per-stage checks.
    pub op_seeds: u64,
    /// Number of random seeds for the full-model check.
    pub model_seeds: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            op_seeds: 20,
            model_seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Trial set written by `synth` and read by `train`, `eval` and `sweep`.
    pub data: PathBuf,
    /// Checkpoint manifest; the payload goes next to it.
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub bench_csv: PathBuf,
    pub sweep_csv: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        let out = |f: &str| PathBuf::from("out").join(f);
        PathsConfig {
            data: out("synthetic.eegb"),
            checkpoint: out("model.json"),
            metrics_csv: out("metrics.csv"),
            summary_json: out("summary.json"),
            bench_csv: out("bench.csv"),
            sweep_csv: out("sweep.csv"),
        }
    }
}

/// Command-line flag for each leaf key, as `(flag, JSON pointer)`.
pub const FLAGS: &[(&str, &str)] = &[
    ("seed", "/seed"),
    ("n-samples", "/model/n_samples"),
    ("n-channels", "/model/n_channels"),
    ("temporal-kernel", "/model/temporal_kernel"),
    ("spatial-kernel", "/model/spatial_kernel"),
    ("n-filters", "/model/n_filters"),
    ("window", "/model/window"),
    ("heads", "/model/heads"),
    ("n-blocks", "/model/n_blocks"),
    ("mlp-hidden", "/model/mlp_hidden"),
    ("pool-kernel", "/model/pool_kernel"),
    ("pool-stride", "/model/pool_stride"),
    ("n-classes", "/model/n_classes"),
    ("batch-size", "/train/batch_size"),
    ("max-epochs", "/train/max_epochs"),
    ("lr", "/train/lr"),
    ("weight-decay", "/train/weight_decay"),
    ("w-o", "/train/w_o"),
    ("w-m", "/train/w_m"),
    ("margin", "/train/margin"),
    ("normalize-pairs", "/train/normalize_pairs"),
    ("eval-every", "/train/eval_every"),
    ("divergence-guard", "/train/divergence_guard"),
    ("stop-at-accuracy", "/train/stop_at_accuracy"),
    ("fs", "/synth/fs"),
    ("synth-n-samples", "/synth/n_samples"),
    ("cue-sample", "/synth/cue_sample"),
    ("mu-freq-hz", "/synth/mu_freq_hz"),
    ("mu-amp", "/synth/mu_amp"),
    ("erd-attenuation", "/synth/erd_attenuation"),
    ("noise-std", "/synth/noise_std"),
    ("trials-per-class", "/synth/n_trials_per_class"),
    ("n-subjects", "/synth/n_subjects"),
    ("subject-amp-jitter", "/synth/subject_amp_jitter"),
    ("channel-gain-jitter", "/synth/channel_gain_jitter"),
    ("preprocess", "/preprocess/enabled"),
    ("low-hz", "/preprocess/low_hz"),
    ("high-hz", "/preprocess/high_hz"),
    ("standardize", "/preprocess/standardize"),
    ("standardize-decay", "/preprocess/decay"),
    ("standardize-eps", "/preprocess/eps"),
    ("mirror-pairs", "/mirror/pairs"),
    ("train-subjects", "/split/train_subjects"),
    ("test-subjects", "/split/test_subjects"),
    ("bench-batch", "/bench/batch"),
    ("bench-runs", "/bench/n_runs"),
    ("bench-lens", "/bench/lens"),
    ("bench-reps", "/bench/reps"),
    ("sweep-heads", "/sweep/heads"),
    ("sweep-blocks", "/sweep/n_blocks"),
    ("gradcheck-op-seeds", "/gradcheck/op_seeds"),
    ("gradcheck-model-seeds", "/gradcheck/model_seeds"),
    ("data", "/paths/data"),
    ("checkpoint", "/paths/checkpoint"),
    ("metrics-csv", "/paths/metrics_csv"),
    ("summary-json", "/paths/summary_json"),
    ("bench-csv", "/paths/bench_csv"),
    ("sweep-csv", "/paths/sweep_csv"),
];

/// Parses a flag value using the type of the default at the same key.
fn parse_value(flag: &str, raw: &str, default: &Value) -> Result<Value> {
    let scalar = |s: &str| -> Result<Value> {
        serde_json::from_str(s).with_context(|| format!("--{flag}: cannot parse {s:?}"))
    };
    Ok(match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items)
            if items.first().is_some_and(Value::is_array) || flag == "mirror-pairs" =>
        {
            let pairs = raw
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|p| match p.split_once(':') {
                    Some((l, r)) => Ok(Value::from(vec![l.trim(), r.trim()])),
                    None => bail!("--{flag}: expected LEFT:RIGHT, got {p:?}"),
                })
                .collect::<Result<Vec<_>>>()?;
            Value::Array(pairs)
        }
        Value::Array(_) => Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| scalar(s.trim()))
                .collect::<Result<_>>()?,
        ),
        Value::Null if raw.eq_ignore_ascii_case("none") => Value::Null,
        _ => scalar(raw)?,
    })
}

/// Defaults, then the config file, then `MCLSWT_SEED`, then flags.
pub fn resolve(
    file: Option<&Path>,
    env_seed: Option<&str>,
    overrides: &[(&str, String)],
) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let mut doc = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            serde_json::to_value(cfg)?
        }
        None => defaults.clone(),
    };
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?;
        doc["seed"] = Value::from(seed);
    }
    for (flag, raw) in overrides {
        let Some(&(_, pointer)) = FLAGS.iter().find(|(f, _)| f == flag) else {
            bail!("unknown flag --{flag}");
        };
        let default = defaults
            .pointer(pointer)
            .expect("flag table matches defaults");
        let value = parse_value(flag, raw, default)?;
        *doc.pointer_mut(pointer)
            .expect("flag table matches defaults") = value;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(doc).context("flag values do not fit the configuration")?;
    cfg.synth.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    Ok(cfg)
}
