//! Mirror-augmented training, fused evaluation, metrics and benchmarks.

pub mod bench;
pub mod metrics;
pub mod sweep;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, NormMode, Tape, Var};
use crate::data::trial::{batch_tensor, Trial, TrialSet};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossBreakdown, MclWeights};
use crate::mirror::{build_pairs, mirror_trial, ChannelMirrorMap, PairKind, PairList};
use crate::model::{
    forward, fuse_mirror_predictions, predict, BoundParams, ModelParams, SwtConfig, Trace,
};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

pub use bench::{
    bench_attention_scaling, bench_inference, flops_estimate, AttentionTiming, InferenceBench,
};
pub use metrics::{
    cohen_kappa, Confusion, EpochMetrics, EvalResult, MetricsReport, RunStatus, Summary,
};
pub use sweep::{hyper_sweep, write_sweep_csv, SweepGrid, SweepRow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub w_o: f64,
    pub w_m: f64,
    pub margin: Option<f64>,
    /// Average each pair-class sum over its pairs instead of summing.
    pub normalize_pairs: bool,
    /// Supplied by the caller rather than the serialized form, so that one
    /// run-level seed drives every random stream.
    #[serde(skip)]
    pub seed: u64,
    /// Evaluate on the test set every this many epochs.
    pub eval_every: usize,
    /// Stop when `|L_d|` exceeds this.
    pub divergence_guard: f64,
    /// Stop once the test accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = MclWeights::default();
        let adam = AdamConfig::default();
        TrainConfig {
            batch_size: 100,
            max_epochs: 500,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            w_o: w.w_o,
            w_m: w.w_m,
            margin: w.margin,
            normalize_pairs: w.normalize,
            seed: 0,
            eval_every: 1,
            divergence_guard: 100.0,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 to form pairs, got {}",
                self.batch_size
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }

    pub fn mcl_weights(&self) -> MclWeights {
        MclWeights {
            w_o: self.w_o,
            w_m: self.w_m,
            margin: self.margin,
            normalize: self.normalize_pairs,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// `B` originals stacked over their `B` mirrors as `[2B, 1, T, C]`, with
/// class indices (mirror labels flipped) and the pair list.
pub struct AugmentedBatch {
    pub input: Tensor,
    pub labels: Vec<usize>,
    pub pairs: PairList,
}

pub fn augmented_batch(originals: &[&Trial], map: &ChannelMirrorMap) -> Result<AugmentedBatch> {
    let owned: Vec<Trial> = originals.iter().map(|t| (*t).clone()).collect();
    let mirrors = owned
        .iter()
        .map(|t| mirror_trial(t, map))
        .collect::<Result<Vec<_>>>()?;
    let pairs = build_pairs(&owned, &mirrors)?;
    let all: Vec<&Trial> = owned.iter().chain(&mirrors).collect();
    Ok(AugmentedBatch {
        input: batch_tensor(all.iter().copied())?,
        labels: all.iter().map(|t| t.label.index()).collect(),
        pairs,
    })
}

pub struct BatchLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub batch_stats: Option<BatchStats>,
    pub bound: BoundParams,
}

/// Train-mode forward pass of an augmented batch and the combined loss.
pub fn batch_loss(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &SwtConfig,
    batch: &AugmentedBatch,
    weights: &MclWeights,
    trainable: bool,
) -> Result<BatchLoss> {
    let bound = params.bind(tape, trainable);
    let x = tape.constant(&batch.input);
    let out = forward(
        tape,
        x,
        params,
        &bound,
        cfg,
        NormMode::Train,
        &mut Trace::disabled(),
    )?;
    let (loss, breakdown) = combined_loss(
        tape,
        out.probs,
        &batch.labels,
        out.embedding,
        &batch.pairs,
        weights,
    )?;
    Ok(BatchLoss {
        loss,
        breakdown,
        batch_stats: out.batch_stats,
        bound,
    })
}

/// One optimizer step on `originals`.
pub fn train_step(
    params: &mut ModelParams,
    cfg: &SwtConfig,
    adam: &mut AdamState,
    originals: &[&Trial],
    map: &ChannelMirrorMap,
    weights: &MclWeights,
) -> Result<LossBreakdown> {
    let batch = augmented_batch(originals, map)?;
    let mut tape = Tape::new();
    let bl = batch_loss(&mut tape, params, cfg, &batch, weights, true)?;
    let mut grads = tape.backward(bl.loss)?;
    params.load_grads(&bl.bound, &mut grads)?;
    adam.step(params.tensors_mut())?;
    if let Some(s) = bl.batch_stats {
        params.update_running_stats(&s.mean, &s.var, s.count);
    }
    Ok(bl.breakdown)
}

/// Trains from `params`, shuffling `trainset` each epoch. When `testset` is
/// given it is evaluated with mirror fusion every `eval_every` epochs.
pub fn train(
    params: ModelParams,
    cfg: &SwtConfig,
    trainset: &TrialSet,
    testset: Option<&TrialSet>,
    tc: &TrainConfig,
    map: &ChannelMirrorMap,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ModelParams, MetricsReport)> {
    tc.validate()?;
    cfg.validate()?;
    if trainset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = params;
    let mut adam = AdamState::new(tc.adam());
    let weights = tc.mcl_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    let mut epochs = Vec::with_capacity(tc.max_epochs);
    let start = Instant::now();
    let mut status = RunStatus::Completed;

    'epochs: for epoch in 1..=tc.max_epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len().div_ceil(tc.batch_size));
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            let originals: Vec<&Trial> = chunk.iter().map(|&i| &trainset.trials[i]).collect();
            let b = train_step(&mut params, cfg, &mut adam, &originals, map, &weights).map_err(
                |e| Error::Training {
                    epoch,
                    step,
                    source: Box::new(e),
                },
            )?;
            losses.push(b);
            if b.l_d.abs() > tc.divergence_guard {
                status = RunStatus::Diverged {
                    epoch,
                    step,
                    l_d: b.l_d,
                    suggestion: "set a margin to bound the contrastive loss".into(),
                };
                let m = EpochMetrics::from_losses(epoch, &losses, start.elapsed().as_secs_f64());
                on_epoch(&m);
                epochs.push(m);
                break 'epochs;
            }
        }
        let mut m = EpochMetrics::from_losses(epoch, &losses, 0.0);
        if let Some(test) = testset.filter(|_| epoch % tc.eval_every == 0 || epoch == tc.max_epochs)
        {
            let r = evaluate(&params, cfg, test, map)?;
            m.test_accuracy = Some(r.accuracy);
            m.test_kappa = Some(r.kappa);
        }
        m.wall_clock_s = start.elapsed().as_secs_f64();
        on_epoch(&m);
        let reached =
            matches!((tc.stop_at_accuracy, m.test_accuracy), (Some(t), Some(a)) if a >= t);
        epochs.push(m);
        if reached {
            status = RunStatus::ReachedTarget { epoch };
            break;
        }
    }
    Ok((params, MetricsReport::new(epochs, status)))
}

/// Trials per eval-mode forward pass.
pub const EVAL_CHUNK: usize = 64;

/// Eval-mode class probabilities `[N, 2]` and embeddings `[N, E]`.
pub fn predict_trials(
    params: &ModelParams,
    cfg: &SwtConfig,
    trials: &[Trial],
) -> Result<(Tensor, Tensor)> {
    let mut probs = Vec::with_capacity(trials.len() * 2);
    let mut emb = Vec::with_capacity(trials.len() * cfg.embedding_dim());
    for chunk in trials.chunks(EVAL_CHUNK) {
        let (p, e) = predict(params, cfg, &batch_tensor(chunk)?)?;
        probs.extend_from_slice(p.data());
        emb.extend_from_slice(e.data());
    }
    Ok((
        Tensor::new(vec![trials.len(), 2], probs)?,
        Tensor::new(vec![trials.len(), cfg.embedding_dim()], emb)?,
    ))
}

/// Fused probabilities: each trial and its mirror, mirror classes swapped,
/// averaged.
pub fn predict_fused(
    params: &ModelParams,
    cfg: &SwtConfig,
    trials: &[Trial],
    map: &ChannelMirrorMap,
) -> Result<Tensor> {
    let mirrors = trials
        .iter()
        .map(|t| mirror_trial(t, map))
        .collect::<Result<Vec<_>>>()?;
    let (po, _) = predict_trials(params, cfg, trials)?;
    let (pm, _) = predict_trials(params, cfg, &mirrors)?;
    fuse_mirror_predictions(&po, &pm)
}

pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    let k = p.shape().last().copied().unwrap_or(1);
    p.data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Fused accuracy and kappa on a frozen model (eval-mode batch norm).
pub fn evaluate(
    params: &ModelParams,
    cfg: &SwtConfig,
    testset: &TrialSet,
    map: &ChannelMirrorMap,
) -> Result<EvalResult> {
    if testset.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    let fused = predict_fused(params, cfg, &testset.trials, map)?;
    let truth: Vec<usize> = testset.trials.iter().map(|t| t.label.index()).collect();
    EvalResult::from_confusion(Confusion::from_predictions(&truth, &argmax_rows(&fused))?)
}

/// Accuracy of the unfused eval-mode predictions.
pub fn plain_accuracy(params: &ModelParams, cfg: &SwtConfig, trials: &[Trial]) -> Result<f64> {
    let (p, _) = predict_trials(params, cfg, trials)?;
    let truth: Vec<usize> = trials.iter().map(|t| t.label.index()).collect();
    Ok(Confusion::from_predictions(&truth, &argmax_rows(&p))?.accuracy())
}

/// Mean embedding distance over positive and negative pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub mean_positive: f64,
    pub mean_negative: f64,
}

impl PairSeparation {
    pub fn margin(&self) -> f64 {
        self.mean_negative - self.mean_positive
    }
}

/// Eval-mode embeddings of `trials` and their mirrors, with distances
/// averaged over the pair list built from them.
pub fn pair_separation(
    params: &ModelParams,
    cfg: &SwtConfig,
    trials: &[Trial],
    map: &ChannelMirrorMap,
) -> Result<PairSeparation> {
    let mirrors = trials
        .iter()
        .map(|t| mirror_trial(t, map))
        .collect::<Result<Vec<_>>>()?;
    let pairs = build_pairs(trials, &mirrors)?;
    let all: Vec<Trial> = trials.iter().chain(&mirrors).cloned().collect();
    let (_, emb) = predict_trials(params, cfg, &all)?;
    let e = emb.shape()[1];
    let row = |i: usize| &emb.data()[i * e..(i + 1) * e];
    let (mut pos, mut neg) = ((0.0, 0usize), (0.0, 0usize));
    for p in pairs
        .of_kind(PairKind::OrigOrig)
        .chain(pairs.of_kind(PairKind::MirrorOrig))
    {
        let d = row(p.i)
            .iter()
            .zip(row(p.j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let acc = if p.g > 0 { &mut pos } else { &mut neg };
        acc.0 += d;
        acc.1 += 1;
    }
    if pos.1 == 0 || neg.1 == 0 {
        return Err(Error::Evaluation(
            "need both positive and negative pairs".into(),
        ));
    }
    Ok(PairSeparation {
        mean_positive: pos.0 / pos.1 as f64,
        mean_negative: neg.0 / neg.1 as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::trial::Label;

    #[test]
    fn argmax_prefers_first_on_ties() {
        let p = Tensor::new(vec![3, 2], vec![0.5, 0.5, 0.2, 0.8, 0.9, 0.1]).unwrap();
        assert_eq!(argmax_rows(&p), vec![0, 1, 0]);
    }

    #[test]
    fn config_guards() {
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn augmented_batch_layout() {
        let t = |l| Trial::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], l, 1).unwrap();
        let (a, b) = (t(Label::Left), t(Label::Right));
        let batch = augmented_batch(&[&a, &b], &ChannelMirrorMap::c3_cz_c4()).unwrap();
        assert_eq!(batch.input.shape(), &[4, 1, 2, 3]);
        assert_eq!(batch.labels, vec![0, 1, 1, 0]);
        assert_eq!(&batch.input.data()[12..18], &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(batch.pairs.pairs.len(), 1 + 4);
    }
}
