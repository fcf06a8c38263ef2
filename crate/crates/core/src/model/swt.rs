//! Forward pass of the sliding-window transformer.
//!
//! ```text
//! x [B,1,T,C]
//!   → temporal conv (K×1) → spatial conv (1×C) → batch norm → [B, L, D]
//!   → n_blocks × ( windowed MSA + MLP , shifted-window MSA + MLP )
//!   → [B, D, L] → square → avg pool → log → flatten      (embedding)
//!   → Linear1 → GELU → Linear2 → softmax                  (probabilities)
//! ```

use crate::autodiff::{BatchStats, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::SwtConfig;
use super::params::{stage_prefix, BoundParams, ModelParams};

/// Added to pooled power before the log.
pub const LOG_EPS: f64 = 1e-6;

/// One row of the per-layer shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub block: String,
    pub layer: String,
    pub shape: Vec<usize>,
    pub params: usize,
}

/// Optional collector of per-layer output shapes.
#[derive(Default)]
pub struct Trace {
    enabled: bool,
    pub records: Vec<LayerRecord>,
}

impl Trace {
    pub fn enabled() -> Self {
        Trace {
            enabled: true,
            records: Vec::new(),
        }
    }

    pub fn disabled() -> Self {
        Trace::default()
    }

    fn push(&mut self, block: &str, layer: &str, shape: &[usize], params: usize) {
        if self.enabled {
            self.records.push(LayerRecord {
                block: block.to_string(),
                layer: layer.to_string(),
                shape: shape.to_vec(),
                params,
            });
        }
    }
}

/// Tape handles of one attention stage's parameters.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub ln1: (Var, Var),
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub out: (Var, Var),
    pub ln2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
}

impl StageVars {
    pub fn from_bound(bound: &BoundParams, block: usize, shifted: bool) -> Result<Self> {
        let p = stage_prefix(block, shifted);
        let pair = |a: &str, b: &str| -> Result<(Var, Var)> {
            Ok((
                bound.var(&format!("{p}.{a}"))?,
                bound.var(&format!("{p}.{b}"))?,
            ))
        };
        Ok(StageVars {
            ln1: pair("ln1.gamma", "ln1.beta")?,
            query: pair("attn.query.weight", "attn.query.bias")?,
            key: pair("attn.key.weight", "attn.key.bias")?,
            value: pair("attn.value.weight", "attn.value.bias")?,
            out: pair("attn.out.weight", "attn.out.bias")?,
            ln2: pair("ln2.gamma", "ln2.beta")?,
            fc1: pair("mlp.fc1.weight", "mlp.fc1.bias")?,
            fc2: pair("mlp.fc2.weight", "mlp.fc2.bias")?,
        })
    }
}

fn numel(tape: &Tape, vars: &[Var]) -> usize {
    vars.iter().map(|&v| tape.value(v).len()).sum()
}

/// Windowed multi-head self-attention with residual:
/// `O = concat(h_1..h_H) W^o + F`, attention restricted to windows of
/// `window` steps. With `shift`, the normalized sequence is rolled left by
/// `shift` steps before windowing and rolled back afterwards.
#[allow(clippy::too_many_arguments)]
fn windowed_msa(
    tape: &mut Tape,
    f: Var,
    sv: &StageVars,
    heads: usize,
    window: usize,
    shift: usize,
    trace: &mut Trace,
    block: &str,
) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::Rank {
            op: "windowed_msa",
            expected: 3,
            shape: fs,
        });
    }
    if window == 0 || !fs[1].is_multiple_of(window) {
        return Err(Error::Window(format!(
            "sequence length {} is not divisible by window size {window}",
            fs[1]
        )));
    }
    let mut h = tape.layer_norm(f, sv.ln1.0, sv.ln1.1)?;
    trace.push(
        block,
        "Layer Norm",
        tape.shape(h),
        numel(tape, &[sv.ln1.0, sv.ln1.1]),
    );
    if shift > 0 {
        h = tape.roll(h, 1, -(shift as isize))?;
    }
    let q = tape.linear(h, sv.query.0, sv.query.1)?;
    trace.push(
        block,
        "Query Projection",
        tape.shape(q),
        numel(tape, &[sv.query.0, sv.query.1]),
    );
    let k = tape.linear(h, sv.key.0, sv.key.1)?;
    trace.push(
        block,
        "Key Projection",
        tape.shape(k),
        numel(tape, &[sv.key.0, sv.key.1]),
    );
    let v = tape.linear(h, sv.value.0, sv.value.1)?;
    trace.push(
        block,
        "Value Projection",
        tape.shape(v),
        numel(tape, &[sv.value.0, sv.value.1]),
    );
    let heads_out = tape.window_attention(q, k, v, heads, window)?;
    if let Some(scores) = tape.attention_scores(heads_out) {
        let shape = scores.shape;
        trace.push(block, "Attention Score", &shape, 0);
    }
    let mut proj = tape.linear(heads_out, sv.out.0, sv.out.1)?;
    trace.push(
        block,
        "Projection",
        tape.shape(proj),
        numel(tape, &[sv.out.0, sv.out.1]),
    );
    trace.push(block, "Concatenate", tape.shape(heads_out), 0);
    if shift > 0 {
        proj = tape.roll(proj, 1, shift as isize)?;
    }
    let o = tape.add(proj, f)?;
    trace.push(block, "Residual Add", tape.shape(o), 0);
    Ok(o)
}

/// Windowed attention stage over `[B, L, D]`.
pub fn tw_msa(tape: &mut Tape, f: Var, sv: &StageVars, heads: usize, window: usize) -> Result<Var> {
    windowed_msa(tape, f, sv, heads, window, 0, &mut Trace::disabled(), "")
}

/// Shifted-window attention stage: windows moved by `window / 2` with a
/// cyclic roll (no masking across the wrap-around seam).
pub fn stw_msa(
    tape: &mut Tape,
    f: Var,
    sv: &StageVars,
    heads: usize,
    window: usize,
) -> Result<Var> {
    windowed_msa(
        tape,
        f,
        sv,
        heads,
        window,
        window / 2,
        &mut Trace::disabled(),
        "",
    )
}

/// `A = O + FC(GELU(FC(LN(O))))`.
pub fn mlp_block(tape: &mut Tape, o: Var, sv: &StageVars) -> Result<Var> {
    mlp_traced(tape, o, sv, &mut Trace::disabled(), "")
}

fn mlp_traced(
    tape: &mut Tape,
    o: Var,
    sv: &StageVars,
    trace: &mut Trace,
    block: &str,
) -> Result<Var> {
    let h = tape.layer_norm(o, sv.ln2.0, sv.ln2.1)?;
    trace.push(
        block,
        "Layer Norm",
        tape.shape(h),
        numel(tape, &[sv.ln2.0, sv.ln2.1]),
    );
    let h = tape.linear(h, sv.fc1.0, sv.fc1.1)?;
    trace.push(
        block,
        "Linear",
        tape.shape(h),
        numel(tape, &[sv.fc1.0, sv.fc1.1]),
    );
    let h = tape.gelu(h)?;
    trace.push(block, "GELU", tape.shape(h), 0);
    let h = tape.linear(h, sv.fc2.0, sv.fc2.1)?;
    trace.push(
        block,
        "Linear",
        tape.shape(h),
        numel(tape, &[sv.fc2.0, sv.fc2.1]),
    );
    let a = tape.add(h, o)?;
    trace.push(block, "Residual Add", tape.shape(a), 0);
    Ok(a)
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    /// Class probabilities `[B, 2]` (column 0 = left, 1 = right).
    pub probs: Var,
    /// Flattened log-pooled features `[B, D * pooled_len]`.
    pub embedding: Var,
    /// Train-mode batch-norm statistics, for running-estimate updates.
    pub batch_stats: Option<BatchStats>,
}

/// Convolutional feature extraction: `[B,1,T,C] → [B, L, D]`.
pub fn feature_extract(
    tape: &mut Tape,
    x: Var,
    bound: &BoundParams,
    running: (&[f64], &[f64]),
    mode: NormMode,
    trace: &mut Trace,
) -> Result<(Var, Option<BatchStats>)> {
    const BLOCK: &str = "Feature Extraction Block";
    let (tw, tb) = (
        bound.var("feature.temporal.weight")?,
        bound.var("feature.temporal.bias")?,
    );
    let (sw, sb) = (
        bound.var("feature.spatial.weight")?,
        bound.var("feature.spatial.bias")?,
    );
    let (g, b) = (
        bound.var("feature.bn.gamma")?,
        bound.var("feature.bn.beta")?,
    );

    let h = tape.conv2d_valid(x, tw, tb)?;
    trace.push(
        BLOCK,
        "Temporal Conv",
        tape.shape(h),
        numel(tape, &[tw, tb]),
    );
    let h = tape.conv2d_valid(h, sw, sb)?;
    trace.push(
        BLOCK,
        "Spatial Filter",
        tape.shape(h),
        numel(tape, &[sw, sb]),
    );
    let (h, stats) = tape.batch_norm(h, g, b, mode, Some(running))?;
    trace.push(
        BLOCK,
        "Feature Normalization",
        tape.shape(h),
        numel(tape, &[g, b]),
    );
    let s = tape.shape(h).to_vec();
    let h = tape.reshape(h, &[s[0], s[1], s[2] * s[3]])?;
    let h = tape.permute(h, &[0, 2, 1])?;
    trace.push(BLOCK, "Rearrange", tape.shape(h), 0);
    Ok((h, stats))
}

/// Full forward pass on `x: [B, 1, T, C]`.
pub fn forward(
    tape: &mut Tape,
    x: Var,
    params: &ModelParams,
    bound: &BoundParams,
    cfg: &SwtConfig,
    mode: NormMode,
    trace: &mut Trace,
) -> Result<ForwardOutput> {
    let xs = tape.shape(x).to_vec();
    let expected = [
        xs.first().copied().unwrap_or(0),
        1,
        cfg.n_samples,
        cfg.n_channels,
    ];
    if xs.len() != 4 {
        return Err(Error::Rank {
            op: "forward",
            expected: 4,
            shape: xs,
        });
    }
    for (axis, (&want, &got)) in expected.iter().zip(&xs).enumerate().skip(1) {
        if want != got {
            return Err(Error::Dimension {
                op: "forward",
                axis: format!("input axis {axis}"),
                expected: want,
                actual: got,
            });
        }
    }
    trace.push("Input", "Input", &xs, 0);

    let (mut a, batch_stats) =
        feature_extract(tape, x, bound, params.running_stats(), mode, trace)?;

    for block in 0..cfg.n_blocks {
        for shifted in [false, true] {
            let label = if cfg.n_blocks == 1 {
                "(S)TW-MSA".to_string()
            } else {
                format!("(S)TW-MSA block {}", block + 1)
            };
            let sv = StageVars::from_bound(bound, block, shifted)?;
            let shift = if shifted { cfg.window / 2 } else { 0 };
            let o = windowed_msa(tape, a, &sv, cfg.heads, cfg.window, shift, trace, &label)?;
            a = mlp_traced(tape, o, &sv, trace, &label)?;
        }
    }

    const BLOCK: &str = "Classification Block";
    let h = tape.permute(a, &[0, 2, 1])?;
    let h = tape.square(h)?;
    let h = tape.avg_pool_time(h, cfg.pool_kernel, cfg.pool_stride)?;
    trace.push(BLOCK, "Average Pool", tape.shape(h), 0);
    let h = tape.log(h, LOG_EPS)?;
    trace.push(BLOCK, "Log", tape.shape(h), 0);
    let s = tape.shape(h).to_vec();
    let embedding = tape.reshape(h, &[s[0], s[1] * s[2]])?;

    let (w1, b1) = (
        bound.var("classifier.linear1.weight")?,
        bound.var("classifier.linear1.bias")?,
    );
    let (w2, b2) = (
        bound.var("classifier.linear2.weight")?,
        bound.var("classifier.linear2.bias")?,
    );
    let h = tape.linear(embedding, w1, b1)?;
    trace.push(BLOCK, "Linear1", tape.shape(h), numel(tape, &[w1, b1]));
    let h = tape.gelu(h)?;
    trace.push(BLOCK, "Gelu", tape.shape(h), 0);
    let logits = tape.linear(h, w2, b2)?;
    trace.push(BLOCK, "Linear2", tape.shape(logits), numel(tape, &[w2, b2]));
    let probs = tape.softmax_lastdim(logits)?;

    Ok(ForwardOutput {
        probs,
        embedding,
        batch_stats,
    })
}

/// Eval-mode inference returning `(probs [B,2], embedding [B,E])`.
pub fn predict(params: &ModelParams, cfg: &SwtConfig, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x);
    let out = forward(
        &mut tape,
        xv,
        params,
        &bound,
        cfg,
        NormMode::Eval,
        &mut Trace::disabled(),
    )?;
    Ok((
        tape.value(out.probs).clone(),
        tape.value(out.embedding).clone(),
    ))
}

/// Swaps the two class columns of `[B, 2]` probabilities.
pub fn swap_classes(p: &Tensor) -> Result<Tensor> {
    if p.rank() != 2 || p.shape()[1] != 2 {
        return Err(Error::Rank {
            op: "swap_classes",
            expected: 2,
            shape: p.shape().to_vec(),
        });
    }
    let data = p.data().chunks(2).flat_map(|r| [r[1], r[0]]).collect();
    Tensor::new(p.shape().to_vec(), data)
}

/// Mirror fusion: the mirrored trial's class probabilities are swapped and
/// averaged with the original's, `[(l_o + r_m)/2, (r_o + l_m)/2]`.
pub fn fuse_mirror_predictions(p_orig: &Tensor, p_mirror: &Tensor) -> Result<Tensor> {
    if p_orig.rank() != 2 || p_orig.shape()[1] != 2 {
        return Err(Error::Rank {
            op: "fuse_mirror_predictions",
            expected: 2,
            shape: p_orig.shape().to_vec(),
        });
    }
    if p_orig.shape() != p_mirror.shape() {
        return Err(Error::Dimension {
            op: "fuse_mirror_predictions",
            axis: "batch".into(),
            expected: p_orig.shape()[0],
            actual: p_mirror.shape().first().copied().unwrap_or(0),
        });
    }
    let data = p_orig
        .data()
        .chunks(2)
        .zip(p_mirror.data().chunks(2))
        .flat_map(|(o, m)| [(o[0] + m[1]) / 2.0, (o[1] + m[0]) / 2.0])
        .collect();
    Tensor::new(p_orig.shape().to_vec(), data)
}
