use mclswt::autodiff::Tape;
use mclswt::data::{Label, Provenance, Trial};
use mclswt::losses::{mirror_contrastive_loss, MclWeights};
use mclswt::mirror::{build_pairs, mirror_trial, ChannelMirrorMap, PairKind, PairList};
use mclswt::model::SwtConfig;
use mclswt::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trial(samples: usize, data: Vec<f64>, label: Label) -> Trial {
    Trial::new(samples, 3, data, label, 1).unwrap()
}

fn label_of(left: bool) -> Label {
    if left {
        Label::Left
    } else {
        Label::Right
    }
}

fn batch(labels: &[Label]) -> (Vec<Trial>, Vec<Trial>) {
    let map = ChannelMirrorMap::c3_cz_c4();
    let originals: Vec<Trial> = labels
        .iter()
        .enumerate()
        .map(|(k, &l)| trial(1, vec![k as f64, 0.5, -(k as f64)], l))
        .collect();
    let mirrors = originals
        .iter()
        .map(|t| mirror_trial(t, &map).unwrap())
        .collect();
    (originals, mirrors)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() + 1e-12).sqrt()
}

/// Independent double loop over the two pair classes, written from the
/// loss definition rather than from the pair list.
fn brute_force(emb: &[Vec<f64>], labels: &[Label], w: &MclWeights) -> f64 {
    let b = labels.len();
    let mirror_label = |k: usize| labels[k].flipped();
    let term = |same: bool, d: f64| match (same, w.margin) {
        (true, _) => d,
        (false, None) => -d,
        (false, Some(m)) => -d.min(m),
    };
    let (mut oo, mut n_oo) = (0.0, 0usize);
    for i in 0..b {
        for j in 0..b {
            if i < j {
                oo += term(labels[i] == labels[j], dist(&emb[i], &emb[j]));
                n_oo += 1;
            }
        }
    }
    let (mut mo, mut n_mo) = (0.0, 0usize);
    for m in 0..b {
        for j in 0..b {
            mo += term(mirror_label(m) == labels[j], dist(&emb[b + m], &emb[j]));
            n_mo += 1;
        }
    }
    if w.normalize {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        w.w_o * mean(oo, n_oo) + w.w_m * mean(mo, n_mo)
    } else {
        w.w_o * oo + w.w_m * mo
    }
}

fn loss(emb: &Tensor, pairs: &PairList, w: &MclWeights) -> f64 {
    let mut tape = Tape::new();
    let e = tape.constant(emb);
    let l = mirror_contrastive_loss(&mut tape, e, pairs, w).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn contrastive_loss_matches_brute_force_over_fifty_seeds() {
    let variants = [
        MclWeights::default(),
        MclWeights {
            normalize: false,
            ..MclWeights::default()
        },
        MclWeights {
            margin: Some(1.5),
            ..MclWeights::default()
        },
        MclWeights {
            w_o: 1.0,
            w_m: 0.0,
            margin: None,
            normalize: true,
        },
    ];
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in 1..=6usize {
            let labels: Vec<Label> = (0..b).map(|_| label_of(rng.gen())).collect();
            let (originals, mirrors) = batch(&labels);
            let pairs = build_pairs(&originals, &mirrors).unwrap();
            assert_eq!(pairs.count(PairKind::OrigOrig), b * (b - 1) / 2);
            assert_eq!(pairs.count(PairKind::MirrorOrig), b * b);

            let e = 1 + rng.gen_range(0..6);
            let rows: Vec<Vec<f64>> = (0..2 * b)
                .map(|_| (0..e).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let emb = Tensor::new(vec![2 * b, e], rows.concat()).unwrap();
            for w in &variants {
                let got = loss(&emb, &pairs, w);
                let want = brute_force(&rows, &labels, w);
                assert!(
                    (got - want).abs() < 1e-9,
                    "seed {seed} B={b} {w:?}: {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn four_trial_pair_table() {
    use Label::{Left as L, Right as R};
    let (originals, mirrors) = batch(&[L, L, R, R]);
    let pairs = build_pairs(&originals, &mirrors).unwrap();
    let oo: Vec<(usize, usize, i8)> = pairs
        .of_kind(PairKind::OrigOrig)
        .map(|p| (p.i, p.j, p.g))
        .collect();
    assert_eq!(
        oo,
        vec![
            (0, 1, 1),
            (0, 2, -1),
            (0, 3, -1),
            (1, 2, -1),
            (1, 3, -1),
            (2, 3, 1)
        ]
    );
    // Mirrors 4 and 5 are right, 6 and 7 are left.
    let mo: Vec<(usize, usize, i8)> = pairs
        .of_kind(PairKind::MirrorOrig)
        .map(|p| (p.i, p.j, p.g))
        .collect();
    let mut expected = Vec::new();
    for (m, mirror_left) in [(4, false), (5, false), (6, true), (7, true)] {
        for (j, orig_left) in [(0, true), (1, true), (2, false), (3, false)] {
            expected.push((m, j, if mirror_left == orig_left { 1 } else { -1 }));
        }
    }
    assert_eq!(mo, expected);
    assert_eq!(pairs.positives(), 2 + 8);
    assert_eq!(pairs.negatives(), 4 + 8);
}

/// At the model's embedding width. In a handful of dimensions the unweighted
/// positive mean can rise instead: each row sits in more negative pairs than
/// positive ones, and their push outweighs the pull.
#[test]
fn contrastive_step_separates_pairs() {
    let e = SwtConfig::default().embedding_dim();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = 6;
        let mut labels: Vec<Label> = (0..b).map(|_| label_of(rng.gen())).collect();
        labels[0] = Label::Left;
        labels[1] = Label::Right;
        let (originals, mirrors) = batch(&labels);
        let pairs = build_pairs(&originals, &mirrors).unwrap();
        let emb = Tensor::uniform(&[2 * b, e], 1.0, &mut rng);

        let means = |t: &Tensor| {
            let row = |i: usize| &t.data()[i * e..(i + 1) * e];
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for p in &pairs.pairs {
                let d = dist(row(p.i), row(p.j));
                if p.g > 0 {
                    pos.push(d)
                } else {
                    neg.push(d)
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            (mean(&pos), mean(&neg))
        };

        let mut tape = Tape::new();
        let v = tape.param(&emb);
        let l = mirror_contrastive_loss(&mut tape, v, &pairs, &MclWeights::default()).unwrap();
        let grads = tape.backward(l).unwrap();
        let g = grads.get(v).unwrap();
        let stepped = Tensor::new(
            emb.shape().to_vec(),
            emb.data()
                .iter()
                .zip(g)
                .map(|(x, d)| x - 1e-2 * d)
                .collect(),
        )
        .unwrap();
        let (pos0, neg0) = means(&emb);
        let (pos1, neg1) = means(&stepped);
        assert!(pos1 < pos0, "seed {seed}: positive {pos0} -> {pos1}");
        assert!(neg1 > neg0, "seed {seed}: negative {neg0} -> {neg1}");
    }
}

#[test]
fn zero_distance_pairs_get_zero_gradient() {
    let (originals, mirrors) = batch(&[Label::Left, Label::Left]);
    let pairs = build_pairs(&originals, &mirrors).unwrap();
    // Originals coincide; mirrors sit elsewhere.
    let emb = Tensor::new(vec![4, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 3.0]).unwrap();
    let w = MclWeights {
        w_o: 1.0,
        w_m: 0.0,
        margin: None,
        normalize: true,
    };
    let mut tape = Tape::new();
    let v = tape.param(&emb);
    let l = mirror_contrastive_loss(&mut tape, v, &pairs, &w).unwrap();
    assert!(tape.value(l).item().unwrap().abs() < 1e-5);
    let grads = tape.backward(l).unwrap();
    assert!(grads
        .get(v)
        .unwrap()
        .iter()
        .all(|g| g.abs() < 1e-12 && g.is_finite()));
}

fn arb_trial() -> impl Strategy<Value = Trial> {
    (1usize..6, any::<bool>()).prop_flat_map(|(samples, left)| {
        prop::collection::vec(-100.0f64..100.0, samples * 3)
            .prop_map(move |data| trial(samples, data, label_of(left)))
    })
}

proptest! {
    #[test]
    fn mirroring_twice_is_the_identity(t in arb_trial()) {
        let map = ChannelMirrorMap::c3_cz_c4();
        let once = mirror_trial(&t, &map).unwrap();
        prop_assert_eq!(once.label, t.label.flipped());
        prop_assert_eq!(once.provenance, Provenance::Mirror);
        for s in 0..t.samples() {
            prop_assert_eq!(once.at(s, 0), t.at(s, 2));
            prop_assert_eq!(once.at(s, 1), t.at(s, 1));
            prop_assert_eq!(once.at(s, 2), t.at(s, 0));
        }
        let twice = mirror_trial(&once, &map).unwrap();
        prop_assert_eq!(twice, t);
    }

    #[test]
    fn pair_counts_and_signs(lefts in prop::collection::vec(any::<bool>(), 1..10)) {
        let labels: Vec<Label> = lefts.iter().map(|&l| label_of(l)).collect();
        let b = labels.len();
        let (originals, mirrors) = batch(&labels);
        let pairs = build_pairs(&originals, &mirrors).unwrap();
        prop_assert_eq!(pairs.count(PairKind::OrigOrig), b * (b - 1) / 2);
        prop_assert_eq!(pairs.count(PairKind::MirrorOrig), b * b);
        let row_label = |r: usize| if r < b { labels[r] } else { labels[r - b].flipped() };
        for p in &pairs.pairs {
            prop_assert_eq!(p.g > 0, row_label(p.i) == row_label(p.j));
            if p.i == p.j + b {
                prop_assert_eq!(p.g, -1);
            }
        }
    }
}
