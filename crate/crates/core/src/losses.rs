//! Mirror contrastive loss on embeddings, cross-entropy on class
//! probabilities, and their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mirror::{PairKind, PairList};

/// Guards `ln p` against zero probabilities.
pub const CE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MclWeights {
    pub w_o: f64,
    pub w_m: f64,
    /// When set, negative-pair terms become `-min(D, margin)`.
    #[serde(default)]
    pub margin: Option<f64>,
    /// Divide each pair-class sum by its pair count. `false` gives the bare
    /// sums, whose magnitude grows with the square of the batch size.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MclWeights {
    fn default() -> Self {
        MclWeights {
            w_o: 0.2,
            w_m: 0.3,
            margin: None,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub n_pos_pairs: usize,
    pub n_neg_pairs: usize,
}

/// Contrastive term `w_o · mean_OO(g·D) + w_m · mean_MO(g·D)` over the rows
/// of `emb: [2B, E]`. A pair class with no pairs contributes 0.
pub fn mirror_contrastive_loss(
    tape: &mut Tape,
    emb: Var,
    pairs: &PairList,
    w: &MclWeights,
) -> Result<Var> {
    let rows = tape.shape(emb).first().copied().unwrap_or(0);
    if rows < 2 * pairs.batch {
        return Err(Error::Dimension {
            op: "mirror_contrastive_loss",
            axis: "embedding rows".into(),
            expected: 2 * pairs.batch,
            actual: rows,
        });
    }
    let idx: Vec<(usize, usize)> = pairs.pairs.iter().map(|p| (p.i, p.j)).collect();
    let n_oo = pairs.count(PairKind::OrigOrig);
    let n_mo = pairs.count(PairKind::MirrorOrig);
    let class_weight = |kind: PairKind| {
        let (weight, n) = match kind {
            PairKind::OrigOrig => (w.w_o, n_oo),
            PairKind::MirrorOrig => (w.w_m, n_mo),
        };
        if w.normalize {
            weight / n as f64
        } else {
            weight
        }
    };
    let weights: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| f64::from(p.g) * class_weight(p.kind))
        .collect();

    let d = tape.pair_distance(emb, &idx)?;
    let Some(margin) = w.margin else {
        return tape.weighted_sum(d, &weights);
    };
    // Negative pairs go through the clamp, positive pairs do not; two
    // weighted sums with complementary zero masks keep both on one tape.
    let pos: Vec<f64> = weights
        .iter()
        .map(|&x| if x > 0.0 { x } else { 0.0 })
        .collect();
    let neg: Vec<f64> = weights
        .iter()
        .map(|&x| if x < 0.0 { x } else { 0.0 })
        .collect();
    let clamped = tape.clamp_max(d, margin)?;
    let lp = tape.weighted_sum(d, &pos)?;
    let ln = tape.weighted_sum(clamped, &neg)?;
    tape.add(lp, ln)
}

/// Mean negative log-probability of the true class over `probs: [N, 2]`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(probs, labels, CE_EPS)
}

pub fn total_loss(l_c: f64, l_d: f64) -> Result<f64> {
    if l_c.is_nan() || l_d.is_nan() {
        return Err(Error::Numeric(format!(
            "loss is NaN (L_c = {l_c}, L_d = {l_d})"
        )));
    }
    Ok(l_c + l_d)
}

/// Builds `L_c + L_d` on the tape and reports each term.
pub fn combined_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[usize],
    emb: Var,
    pairs: &PairList,
    w: &MclWeights,
) -> Result<(Var, LossBreakdown)> {
    let lc = cross_entropy(tape, probs, labels)?;
    let ld = mirror_contrastive_loss(tape, emb, pairs, w)?;
    let l_c = tape.value(lc).item()?;
    let l_d = tape.value(ld).item()?;
    total_loss(l_c, l_d)?;
    let total = tape.add(lc, ld)?;
    let breakdown = LossBreakdown {
        l_c,
        l_d,
        l_total: tape.value(total).item()?,
        n_pos_pairs: pairs.positives(),
        n_neg_pairs: pairs.negatives(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mirror::Pair;
    use crate::tensor::Tensor;

    fn single_pair(g: i8) -> PairList {
        PairList {
            batch: 1,
            pairs: vec![Pair {
                i: 0,
                j: 1,
                g,
                kind: PairKind::OrigOrig,
            }],
        }
    }

    #[test]
    fn three_four_five() {
        let mut tape = Tape::new();
        let e = tape.constant(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let l = mirror_contrastive_loss(&mut tape, e, &single_pair(-1), &MclWeights::default())
            .unwrap();
        assert!((tape.value(l).item().unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_same_label_embeddings_cost_nothing() {
        let mut tape = Tape::new();
        let e = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let l =
            mirror_contrastive_loss(&mut tape, e, &single_pair(1), &MclWeights::default()).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn margin_caps_negative_pairs() {
        let mut tape = Tape::new();
        let e = tape.constant(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let w = MclWeights {
            margin: Some(2.0),
            ..MclWeights::default()
        };
        let l = mirror_contrastive_loss(&mut tape, e, &single_pair(-1), &w).unwrap();
        assert!((tape.value(l).item().unwrap() + 0.4).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let l = cross_entropy(&mut tape, p, &[0, 1]).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-10);

        let p = tape.constant(&Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap());
        let l = cross_entropy(&mut tape, p, &[0, 1]).unwrap();
        let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-9);
        assert!((tape.value(l).item().unwrap() - 0.1643).abs() < 1e-4);

        let p = tape.constant(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let l = cross_entropy(&mut tape, p, &[0]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-11);
    }

    #[test]
    fn total_loss_adds_and_rejects_nan() {
        assert!((total_loss(0.69, -0.2).unwrap() - 0.49).abs() < 1e-12);
        assert_eq!(total_loss(1.25, 0.0).unwrap(), 1.25);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::Numeric(_))));
    }
}
