use mclswt::autodiff::{NormMode, Tape};
use mclswt::optim::{AdamConfig, AdamState};
use mclswt::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn box_kernel_sums_neighbours() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(&t(&[1, 1, 2, 1], &[1.0, 1.0]));
    let b = tape.constant(&t(&[1], &[0.0]));
    let y = tape.conv2d_valid(x, k, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 1]);
    assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
}

#[test]
fn temporal_conv_output_shape() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[2, 1, 1120, 3]));
    let k = tape.constant(&Tensor::zeros(&[40, 1, 25, 1]));
    let b = tape.constant(&Tensor::zeros(&[40]));
    let y = tape.conv2d_valid(x, k, b).unwrap();
    assert_eq!(tape.shape(y), &[2, 40, 1096, 3]);
}

#[test]
fn conv_channel_mismatch_names_the_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 2, 5, 1]));
    let k = tape.constant(&Tensor::zeros(&[1, 1, 2, 1]));
    let b = tape.constant(&Tensor::zeros(&[1]));
    match tape.conv2d_valid(x, k, b) {
        Err(Error::Dimension { axis, .. }) => assert!(!axis.is_empty()),
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn batch_norm_train_standardizes_each_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, c, h, w) = (4, 3, 5, 2);
    let x = Tensor::uniform(&[b, c, h, w], 3.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let g = tape.constant(&Tensor::full(&[c], 1.0));
    let beta = tape.constant(&Tensor::zeros(&[c]));
    let (y, stats) = tape.batch_norm(xv, g, beta, NormMode::Train, None).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.count, b * h * w);
    let y = tape.value(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|n| (0..h * w).map(move |s| (n, s)))
            .map(|(n, s)| y.data()[(n * c + ch) * h * w + s])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_constant_input_and_degenerate_batch() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full(&[3, 2, 4, 1], 5.0));
    let g = tape.constant(&Tensor::full(&[2], 1.0));
    let beta = tape.constant(&Tensor::zeros(&[2]));
    let (y, _) = tape.batch_norm(x, g, beta, NormMode::Train, None).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let single = tape.constant(&Tensor::full(&[1, 2, 4, 1], 5.0));
    let err = tape
        .batch_norm(single, g, beta, NormMode::Train, None)
        .unwrap_err();
    assert!(matches!(err, Error::DegenerateBatch { .. }));
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2, 1, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
    let g = tape.constant(&t(&[1], &[2.0]));
    let beta = tape.constant(&t(&[1], &[0.5]));
    let (y, stats) = tape
        .batch_norm(x, g, beta, NormMode::Eval, Some((&[1.0], &[4.0])))
        .unwrap();
    assert!(stats.is_none());
    let s = (4.0f64 + 1e-5).sqrt();
    let want: Vec<f64> = [1.0, 2.0, 3.0, 4.0]
        .iter()
        .map(|v| 2.0 * (v - 1.0) / s + 0.5)
        .collect();
    assert!(close(tape.value(y).data(), &want, 1e-12));
}

#[test]
fn layer_norm_of_a_constant_row_is_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::full(&[2, 3, 40], 7.0));
    let g = tape.constant(&Tensor::full(&[40], 1.0));
    let b = tape.constant(&Tensor::zeros(&[40]));
    let y = tape.layer_norm(x, g, b).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let w = tape.constant(&eye);
    let b = tape.constant(&Tensor::zeros(&[4]));
    let y = tape.linear(xv, w, b).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn softmax_examples_and_nan() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[2, 2], &[0.0, 0.0, 0.0, 2f64.ln()]));
    let y = tape.softmax_lastdim(x).unwrap();
    assert!(close(
        tape.value(y).data(),
        &[0.5, 0.5, 1.0 / 3.0, 2.0 / 3.0],
        1e-15
    ));
    let bad = tape.constant(&t(&[2], &[0.0, f64::NAN]));
    assert!(matches!(tape.softmax_lastdim(bad), Err(Error::Numeric(_))));
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3], &[-2.0, 3.0, 0.0]));
    let sq = tape.square(x).unwrap();
    assert_eq!(tape.value(sq).data(), &[4.0, 9.0, 0.0]);
    let g = tape.gelu(x).unwrap();
    let gd = tape.value(g).data();
    assert_eq!(gd[2], 0.0);
    assert!((gd[1] - 2.995_950_5).abs() < 1e-6);
    let neg = tape.constant(&t(&[1], &[-1.0]));
    assert!(matches!(tape.log(neg, 1e-6), Err(Error::Numeric(_))));
}

#[test]
fn average_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.avg_pool_time(x, 2, 2).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 3.5]);
    let c = tape.constant(&Tensor::full(&[2, 40, 1096], 0.25));
    let y = tape.avg_pool_time(c, 75, 15).unwrap();
    assert_eq!(tape.shape(y), &[2, 40, 69]);
    assert!(tape
        .value(y)
        .data()
        .iter()
        .all(|&v| (v - 0.25).abs() < 1e-15));
    assert!(matches!(tape.avg_pool_time(x, 5, 1), Err(Error::Window(_))));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    let sq = tape.square(x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.param(&t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Rank { .. })));
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[2, 3, 8], 1.0, &mut rng);
        let w = Tensor::uniform(&[8, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let wv = tape.param(&w);
        let b = tape.constant(&Tensor::zeros(&[8]));
        let h = tape.linear(xv, wv, b).unwrap();
        let h = tape.gelu(h).unwrap();
        let p = tape.softmax_lastdim(h).unwrap();
        let s = tape.square(p).unwrap();
        let l = tape.sum(s).unwrap();
        let v = tape.value(l).item().unwrap();
        let g = tape.backward(l).unwrap();
        (v, g.get(xv).unwrap().to_vec(), g.get(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_decoupled_decay_step() {
    let mut p = t(&[2], &[1.0, -2.0]);
    p.set_grad(vec![0.0, 0.0]).unwrap();
    let mut adam = AdamState::new(AdamConfig::default());
    adam.step(std::iter::once(&mut p)).unwrap();
    assert!(close(
        p.data(),
        &[1.0 - 1e-3 * 0.05, -2.0 + 2.0 * 1e-3 * 0.05],
        1e-15
    ));
    assert_eq!(adam.steps(), 1);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        k in 1usize..7,
        seed in any::<u64>(),
        spread in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[rows, k], spread, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = tape.softmax_lastdim(xv).unwrap();
        for row in tape.value(y).data().chunks(k) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_moments(
        b in 2usize..6,
        c in 1usize..4,
        s in 1usize..8,
        seed in any::<u64>(),
        scale in 0.5f64..20.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[b, c, s, 1], scale, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let g = tape.constant(&Tensor::full(&[c], 1.0));
        let beta = tape.constant(&Tensor::zeros(&[c]));
        let (y, _) = tape.batch_norm(xv, g, beta, NormMode::Train, None).unwrap();
        let y = tape.value(y).data().to_vec();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b).flat_map(|n| y[(n * c + ch) * s..(n * c + ch + 1) * s].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-5);
            // The variance epsilon pulls the output variance below one by
            // about eps / var(x).
            let raw: Vec<f64> = (0..b).flat_map(|n| x.data()[(n * c + ch) * s..(n * c + ch + 1) * s].to_vec()).collect();
            let rm = raw.iter().sum::<f64>() / raw.len() as f64;
            let rv = raw.iter().map(|x| (x - rm) * (x - rm)).sum::<f64>() / raw.len() as f64;
            prop_assert!((v - rv / (rv + 1e-5)).abs() < 1e-9);
        }
    }
}
