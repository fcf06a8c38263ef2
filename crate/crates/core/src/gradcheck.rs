//! Central finite-difference checks of every tape operation, the model's
//! building blocks, and the full training loss.
//!
//! Each check draws random inputs, reduces the op output to a scalar with a
//! fixed random projection, and compares the reverse-mode gradient of every
//! input against `(f(x + h) - f(x - h)) / 2h` entry by entry. The error of
//! an entry is `|a - n| / max(|a|, |n|, floor)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{NormMode, Tape, Var};
use crate::data::synth::{synth_trial, SynthConfig};
use crate::data::trial::{Label, Trial};
use crate::error::Result;
use crate::losses::{combined_loss, mirror_contrastive_loss, MclWeights};
use crate::mirror::{build_pairs, mirror_trial, ChannelMirrorMap};
use crate::model::params::stage_prefix;
use crate::model::{
    forward, mlp_block, stw_msa, tw_msa, BoundParams, ModelParams, StageVars, SwtConfig, Trace,
};
use crate::tensor::Tensor;
use crate::train::augmented_batch;

pub const FD_STEP: f64 = 1e-5;
/// Lower bound of the error denominator, so entries whose true gradient
/// is zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
    pub tolerance: f64,
    pub runs: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    fn merge(&mut self, other: &CheckResult) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.entries += other.entries;
        self.runs += other.runs;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Graph under test: builds an output from the input variables.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn projected(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y).len();
    if n == 1 {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(y, &w)
}

fn scalar(build: &Build<'_>, inputs: &[Tensor], seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let y = build(&mut tape, &vars)?;
    let s = projected(&mut tape, y, seed)?;
    tape.value(s).item()
}

/// Compares analytic and central-difference gradients of every input whose
/// index is in `wrt`.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor],
    wrt: &[usize],
    tolerance: f64,
    seed: u64,
    build: &Build<'_>,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if wrt.contains(&i) {
                tape.param(t)
            } else {
                tape.constant(t)
            }
        })
        .collect();
    let y = build(&mut tape, &vars)?;
    let s = projected(&mut tape, y, seed)?;
    let grads = tape.backward(s)?;

    let mut result = CheckResult {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        entries: 0,
        tolerance,
        runs: 1,
    };
    let mut work = inputs.to_vec();
    for &k in wrt {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[i];
            work[k].data_mut()[i] = x0 + FD_STEP;
            let up = scalar(build, &work, seed)?;
            work[k].data_mut()[i] = x0 - FD_STEP;
            let down = scalar(build, &work, seed)?;
            work[k].data_mut()[i] = x0;
            let n = (up - down) / (2.0 * FD_STEP);
            result.max_rel_err = result.max_rel_err.max(relative_error(a, n));
            result.max_abs_err = result.max_abs_err.max((a - n).abs());
            result.entries += 1;
        }
    }
    Ok(result)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.2..2.0)).collect(),
    )
    .expect("shape")
}

/// Tiny model configuration used by the stage and end-to-end checks.
pub fn tiny_config() -> SwtConfig {
    SwtConfig {
        n_samples: 40,
        n_channels: 3,
        temporal_kernel: 5,
        spatial_kernel: 3,
        n_filters: 8,
        window: 4,
        heads: 2,
        n_blocks: 1,
        mlp_hidden: 16,
        pool_kernel: 8,
        pool_stride: 4,
        n_classes: 2,
    }
}

/// Checks of the individual tape operations for one seed.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();

    let (b, cin, h, w) = (2, 2, 6, 3);
    let x = uniform(&mut rng, &[b, cin, h, w]);
    let k = uniform(&mut rng, &[3, cin, 3, 2]);
    let bias = uniform(&mut rng, &[3]);
    out.push(check_fn(
        "conv2d_valid",
        &[x, k, bias],
        &[0, 1, 2],
        tol,
        seed,
        &|t, v| t.conv2d_valid(v[0], v[1], v[2]),
    )?);

    let x = uniform(&mut rng, &[3, 2, 4, 1]);
    let g = positive(&mut rng, &[2]);
    let be = uniform(&mut rng, &[2]);
    out.push(check_fn(
        "batch_norm(train)",
        &[x.clone(), g.clone(), be.clone()],
        &[0, 1, 2],
        tol,
        seed,
        &|t, v| Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Train, None)?.0),
    )?);
    let (rm, rv) = (vec![0.1, -0.2], vec![0.7, 1.3]);
    out.push(check_fn(
        "batch_norm(eval)",
        &[x, g, be],
        &[0, 1, 2],
        tol,
        seed,
        &|t, v| {
            Ok(
                t.batch_norm(v[0], v[1], v[2], NormMode::Eval, Some((&rm, &rv)))?
                    .0,
            )
        },
    )?);

    let x = uniform(&mut rng, &[2, 3, 5]);
    let g = positive(&mut rng, &[5]);
    let be = uniform(&mut rng, &[5]);
    out.push(check_fn(
        "layer_norm",
        &[x, g, be],
        &[0, 1, 2],
        tol,
        seed,
        &|t, v| t.layer_norm(v[0], v[1], v[2]),
    )?);

    let x = uniform(&mut rng, &[2, 3, 4]);
    let wt = uniform(&mut rng, &[4, 5]);
    let bias = uniform(&mut rng, &[5]);
    out.push(check_fn(
        "linear",
        &[x, wt, bias],
        &[0, 1, 2],
        tol,
        seed,
        &|t, v| t.linear(v[0], v[1], v[2]),
    )?);

    let x = Tensor::uniform(&[3, 4], 3.0, &mut rng);
    out.push(check_fn(
        "softmax_lastdim",
        &[x],
        &[0],
        tol,
        seed,
        &|t, v| t.softmax_lastdim(v[0]),
    )?);

    let x = Tensor::uniform(&[7], 3.0, &mut rng);
    out.push(check_fn(
        "square",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.square(v[0]),
    )?);
    out.push(check_fn("gelu", &[x], &[0], tol, seed, &|t, v| {
        t.gelu(v[0])
    })?);
    let x = positive(&mut rng, &[6]);
    out.push(check_fn("log", &[x], &[0], tol, seed, &|t, v| {
        t.log(v[0], 1e-6)
    })?);

    let x = uniform(&mut rng, &[2, 3, 11]);
    out.push(check_fn(
        "avg_pool_time",
        &[x],
        &[0],
        tol,
        seed,
        &|t, v| t.avg_pool_time(v[0], 4, 3),
    )?);

    let x = uniform(&mut rng, &[2, 3, 4]);
    out.push(check_fn(
        "reshape",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.reshape(v[0], &[6, 4]),
    )?);
    out.push(check_fn(
        "permute",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.permute(v[0], &[2, 0, 1]),
    )?);
    out.push(check_fn(
        "roll",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.roll(v[0], 2, -3),
    )?);
    out.push(check_fn(
        "scale",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.scale(v[0], -1.7),
    )?);
    out.push(check_fn(
        "sum",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.sum(v[0]),
    )?);
    let y = uniform(&mut rng, &[2, 3, 4]);
    out.push(check_fn("add", &[x, y], &[0, 1], tol, seed, &|t, v| {
        t.add(v[0], v[1])
    })?);

    let a = uniform(&mut rng, &[2, 3, 4]);
    let bm = uniform(&mut rng, &[2, 4, 5]);
    out.push(check_fn(
        "matmul",
        &[a.clone(), bm],
        &[0, 1],
        tol,
        seed,
        &|t, v| t.matmul(v[0], v[1], false),
    )?);
    let bt = uniform(&mut rng, &[2, 5, 4]);
    out.push(check_fn(
        "matmul(trans_b)",
        &[a, bt],
        &[0, 1],
        tol,
        seed,
        &|t, v| t.matmul(v[0], v[1], true),
    )?);

    let (ab, al, ad) = (2, 8, 4);
    let q = uniform(&mut rng, &[ab, al, ad]);
    let kk = uniform(&mut rng, &[ab, al, ad]);
    let vv = uniform(&mut rng, &[ab, al, ad]);
    out.push(check_fn(
        "window_attention",
        &[q, kk, vv],
        &[0, 1, 2],
        tol,
        seed,
        &|t, v| t.window_attention(v[0], v[1], v[2], 2, 4),
    )?);

    let probs = positive(&mut rng, &[3, 2]);
    out.push(check_fn(
        "cross_entropy",
        &[probs],
        &[0],
        tol,
        seed,
        &|t, v| t.cross_entropy(v[0], &[0, 1, 1], 1e-12),
    )?);

    let emb = uniform(&mut rng, &[4, 3]);
    let pairs = [(0, 1), (1, 2), (3, 0), (2, 3)];
    out.push(check_fn(
        "pair_distance",
        &[emb],
        &[0],
        tol,
        seed,
        &|t, v| t.pair_distance(v[0], &pairs),
    )?);

    let x = uniform(&mut rng, &[5]);
    let ws = [0.3, -1.0, 2.0, 0.5, -0.25];
    out.push(check_fn(
        "weighted_sum",
        std::slice::from_ref(&x),
        &[0],
        tol,
        seed,
        &|t, v| t.weighted_sum(v[0], &ws),
    )?);
    // Keep entries away from the kink at the clamp value.
    let x = Tensor::new(
        vec![5],
        x.data()
            .iter()
            .map(|v| if (v - 0.1).abs() < 0.05 { v + 0.2 } else { *v })
            .collect(),
    )?;
    out.push(check_fn("clamp_max", &[x], &[0], tol, seed, &|t, v| {
        t.clamp_max(v[0], 0.1)
    })?);

    Ok(out)
}

/// Smaller still for the attention and MLP stages: `L = 8`, `D = 4`,
/// hidden width 8.
pub fn stage_config() -> SwtConfig {
    SwtConfig {
        n_samples: 12,
        n_filters: 4,
        mlp_hidden: 8,
        ..tiny_config()
    }
}

fn stage_inputs(cfg: &SwtConfig, seed: u64) -> Result<(Vec<Tensor>, Vec<String>)> {
    let params = ModelParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    let f = uniform(&mut rng, &[2, cfg.seq_len(), cfg.n_filters]);
    let prefix = stage_prefix(0, false);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(&prefix))
        .map(str::to_string)
        .collect();
    let mut inputs = vec![f];
    for n in &names {
        // Perturb norm affines away from their 1/0 initialization.
        let t = params.tensor(n)?;
        let mut t = t.clone();
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        inputs.push(t);
    }
    Ok((inputs, names))
}

fn stage_vars(names: &[String], vars: &[Var]) -> Result<StageVars> {
    let bound = BoundParams::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
    StageVars::from_bound(&bound, 0, false)
}

/// Attention stages and the MLP block at `stage_config` sizes, plus the
/// contrastive loss on random embeddings.
pub fn block_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let cfg = stage_config();
    let (inputs, names) = stage_inputs(&cfg, seed)?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    let (heads, window) = (cfg.heads, cfg.window);
    let mut out = Vec::new();
    out.push(check_fn(
        "tw_msa",
        &inputs,
        &all,
        OP_TOLERANCE,
        seed,
        &|t, v| tw_msa(t, v[0], &stage_vars(&names, v)?, heads, window),
    )?);
    out.push(check_fn(
        "stw_msa",
        &inputs,
        &all,
        OP_TOLERANCE,
        seed,
        &|t, v| stw_msa(t, v[0], &stage_vars(&names, v)?, heads, window),
    )?);
    out.push(check_fn(
        "mlp_block",
        &inputs,
        &all,
        OP_TOLERANCE,
        seed,
        &|t, v| mlp_block(t, v[0], &stage_vars(&names, v)?),
    )?);

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(29));
    let b = 3;
    let trials: Vec<Trial> = (0..b)
        .map(|i| {
            let label = if rng.gen::<bool>() {
                Label::Left
            } else {
                Label::Right
            };
            Trial::new(1, 3, vec![i as f64, 0.0, -(i as f64)], label, 1)
        })
        .collect::<Result<_>>()?;
    let map = ChannelMirrorMap::c3_cz_c4();
    let mirrors = trials
        .iter()
        .map(|t| mirror_trial(t, &map))
        .collect::<Result<Vec<_>>>()?;
    let pairs = build_pairs(&trials, &mirrors)?;
    let emb = uniform(&mut rng, &[2 * b, 5]);
    for (name, w) in [
        ("mirror_contrastive_loss", MclWeights::default()),
        (
            "mirror_contrastive_loss(margin)",
            MclWeights {
                margin: Some(1.0),
                ..MclWeights::default()
            },
        ),
    ] {
        out.push(check_fn(
            name,
            std::slice::from_ref(&emb),
            &[0],
            OP_TOLERANCE,
            seed,
            &|t, v| mirror_contrastive_loss(t, v[0], &pairs, &w),
        )?);
    }
    Ok(out)
}

/// Total training loss (cross-entropy plus contrastive term) of the tiny
/// model on a mirror-augmented batch of synthetic trials, against every
/// parameter.
pub fn model_check(seed: u64) -> Result<CheckResult> {
    let cfg = tiny_config();
    let params = ModelParams::init(&cfg, seed)?;
    let synth = SynthConfig {
        n_samples: cfg.n_samples,
        cue_sample: 10,
        seed,
        ..SynthConfig::default()
    };
    let trials: Vec<Trial> = (0..4u32)
        .map(|k| {
            synth_trial(
                &synth,
                1,
                if k % 2 == 0 {
                    Label::Left
                } else {
                    Label::Right
                },
                k,
            )
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Trial> = trials.iter().collect();
    let batch = augmented_batch(&refs, &ChannelMirrorMap::c3_cz_c4())?;
    let weights = MclWeights::default();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor> = names
        .iter()
        .map(|n| params.tensor(n).cloned())
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..inputs.len()).collect();
    check_fn(
        "model total loss",
        &inputs,
        &all,
        MODEL_TOLERANCE,
        seed,
        &|t, v| {
            let bound = BoundParams::from_pairs(names.iter().cloned().zip(v.iter().copied()));
            let x = t.constant(&batch.input);
            let out = forward(
                t,
                x,
                &params,
                &bound,
                &cfg,
                NormMode::Train,
                &mut Trace::disabled(),
            )?;
            Ok(combined_loss(
                t,
                out.probs,
                &batch.labels,
                out.embedding,
                &batch.pairs,
                &weights,
            )?
            .0)
        },
    )
}

/// Runs every check over `op_seeds` and the end-to-end check over
/// `model_seeds`, keeping the worst error per check name.
pub fn run_suite(op_seeds: &[u64], model_seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let mut merged: BTreeMap<String, CheckResult> = BTreeMap::new();
    let mut order = Vec::new();
    let mut add = |r: CheckResult| match merged.get_mut(&r.name) {
        Some(m) => m.merge(&r),
        None => {
            order.push(r.name.clone());
            merged.insert(r.name.clone(), r);
        }
    };
    for &s in op_seeds {
        op_checks(s)?.into_iter().for_each(&mut add);
        block_checks(s)?.into_iter().for_each(&mut add);
    }
    for &s in model_seeds {
        add(model_check(s)?);
    }
    Ok(order
        .into_iter()
        .map(|n| merged.remove(&n).expect("merged"))
        .collect())
}
