use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::SwtConfig;

/// How a named parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Uniform in `±sqrt(1/fan_in)`.
    Uniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// Named parameter tensors of the model plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

pub const BN_RUNNING_MEAN: &str = "feature.bn.running_mean";
pub const BN_RUNNING_VAR: &str = "feature.bn.running_var";

/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

pub fn stage_prefix(block: usize, shifted: bool) -> String {
    format!("blocks.{block}.{}", if shifted { "stw" } else { "tw" })
}

fn layout(cfg: &SwtConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.n_filters;
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));

    add(
        "feature.temporal.weight".into(),
        vec![d, 1, cfg.temporal_kernel, 1],
        Init::Uniform {
            fan_in: cfg.temporal_kernel,
        },
    );
    add("feature.temporal.bias".into(), vec![d], Init::Zeros);
    add(
        "feature.spatial.weight".into(),
        vec![d, d, 1, cfg.spatial_kernel],
        Init::Uniform {
            fan_in: d * cfg.spatial_kernel,
        },
    );
    add("feature.spatial.bias".into(), vec![d], Init::Zeros);
    add("feature.bn.gamma".into(), vec![d], Init::Ones);
    add("feature.bn.beta".into(), vec![d], Init::Zeros);

    for block in 0..cfg.n_blocks {
        for shifted in [false, true] {
            let p = stage_prefix(block, shifted);
            add(format!("{p}.ln1.gamma"), vec![d], Init::Ones);
            add(format!("{p}.ln1.beta"), vec![d], Init::Zeros);
            for proj in ["query", "key", "value", "out"] {
                add(
                    format!("{p}.attn.{proj}.weight"),
                    vec![d, d],
                    Init::Uniform { fan_in: d },
                );
                add(format!("{p}.attn.{proj}.bias"), vec![d], Init::Zeros);
            }
            add(format!("{p}.ln2.gamma"), vec![d], Init::Ones);
            add(format!("{p}.ln2.beta"), vec![d], Init::Zeros);
            add(
                format!("{p}.mlp.fc1.weight"),
                vec![d, cfg.mlp_hidden],
                Init::Uniform { fan_in: d },
            );
            add(
                format!("{p}.mlp.fc1.bias"),
                vec![cfg.mlp_hidden],
                Init::Zeros,
            );
            add(
                format!("{p}.mlp.fc2.weight"),
                vec![cfg.mlp_hidden, d],
                Init::Uniform {
                    fan_in: cfg.mlp_hidden,
                },
            );
            add(format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros);
        }
    }

    let e = cfg.embedding_dim();
    add(
        "classifier.linear1.weight".into(),
        vec![e, d],
        Init::Uniform { fan_in: e },
    );
    add("classifier.linear1.bias".into(), vec![d], Init::Zeros);
    add(
        "classifier.linear2.weight".into(),
        vec![d, cfg.n_classes],
        Init::Uniform { fan_in: d },
    );
    add(
        "classifier.linear2.bias".into(),
        vec![cfg.n_classes],
        Init::Zeros,
    );
    out
}

impl ModelParams {
    /// Deterministic initialization: same config and seed give bit-identical
    /// parameters, drawn in declaration order from one ChaCha stream.
    pub fn init(cfg: &SwtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape, init) in layout(cfg) {
            let t = match init {
                Init::Uniform { fan_in } => {
                    Tensor::uniform(&shape, (1.0 / fan_in as f64).sqrt(), &mut rng)
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            tensors.insert(name, t.with_grad());
        }
        let mut buffers = IndexMap::new();
        buffers.insert(BN_RUNNING_MEAN.to_string(), Tensor::zeros(&[cfg.n_filters]));
        buffers.insert(
            BN_RUNNING_VAR.to_string(),
            Tensor::full(&[cfg.n_filters], 1.0),
        );
        Ok(ModelParams { tensors, buffers })
    }

    /// Rebuilds a parameter set from named tensors, checking names and shapes
    /// against the layout for `cfg`.
    pub fn from_named(
        cfg: &SwtConfig,
        tensors: IndexMap<String, Tensor>,
        buffers: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut ordered = IndexMap::new();
        for (name, shape, _) in expected {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            ordered.insert(name, t.clone().with_grad());
        }
        for name in [BN_RUNNING_MEAN, BN_RUNNING_VAR] {
            let t = buffers
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name}")))?;
            if t.shape() != [cfg.n_filters] {
                return Err(Error::Checkpoint(format!(
                    "buffer {name} has shape {:?}, expected [{}]",
                    t.shape(),
                    cfg.n_filters
                )));
            }
        }
        Ok(ModelParams {
            tensors: ordered,
            buffers,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.values_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total learnable scalars (running statistics excluded).
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (
            self.buffers[BN_RUNNING_MEAN].data(),
            self.buffers[BN_RUNNING_VAR].data(),
        )
    }

    /// Exponential update of the running statistics from one train batch;
    /// the variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let unbias = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let rm = self.buffers[BN_RUNNING_MEAN].data_mut();
        for (r, m) in rm.iter_mut().zip(mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = self.buffers[BN_RUNNING_VAR].data_mut();
        for (r, v) in rv.iter_mut().zip(var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
    }

    /// Registers every parameter on `tape`, as gradient-tracking leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t)
                } else {
                    tape.constant(t)
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Copies gradients for every bound parameter into its `grad` field.
    pub fn load_grads(&mut self, bound: &BoundParams, grads: &mut Gradients) -> Result<()> {
        for (name, var) in &bound.vars {
            let g = grads
                .take(*var)
                .ok_or_else(|| Error::Optimizer(format!("no gradient reached {name}")))?;
            self.tensors[name.as_str()].set_grad(g)?;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds names to variables built elsewhere on the tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = SwtConfig::default();
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_parameter_count() {
        let p = ModelParams::init(&SwtConfig::default(), 0).unwrap();
        assert_eq!(
            p.get("blocks.0.tw.attn.query.weight").unwrap().len() + 40,
            1640
        );
        // 1040 + 4840 + 80 + 2 * 19720 + 110440 + 82
        assert_eq!(p.num_scalars(), 155_922);
    }

    #[test]
    fn init_policy() {
        let cfg = SwtConfig::default();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let bound = (1.0f64 / 40.0).sqrt();
        assert!(p
            .get("blocks.0.tw.attn.key.weight")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
        assert!(p
            .get("classifier.linear1.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(p
            .get("blocks.0.stw.ln2.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SwtConfig {
            window: 7,
            ..SwtConfig::default()
        };
        assert!(matches!(ModelParams::init(&cfg, 0), Err(Error::Config(_))));
    }
}
