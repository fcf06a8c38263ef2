use mclswt::autodiff::{NormMode, Tape};
use mclswt::model::params::stage_prefix;
use mclswt::model::swt::{feature_extract, LOG_EPS};
use mclswt::model::{
    forward, param_report, predict, stw_msa, tw_msa, ModelParams, RowStatus, StageVars, SwtConfig,
    Trace,
};
use mclswt::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Smallest valid model: two time steps of width 2, one head, window 2.
fn two_step_config() -> SwtConfig {
    SwtConfig {
        n_samples: 6,
        temporal_kernel: 5,
        n_filters: 2,
        window: 2,
        heads: 1,
        mlp_hidden: 4,
        pool_kernel: 1,
        pool_stride: 1,
        ..SwtConfig::default()
    }
}

fn set(params: &mut ModelParams, name: &str, values: &[f64]) {
    let t = params.get_mut(name).unwrap();
    assert_eq!(t.len(), values.len(), "{name}");
    t.data_mut().copy_from_slice(values);
}

fn zero(params: &mut ModelParams, name: &str) {
    params.get_mut(name).unwrap().data_mut().fill(0.0);
}

/// Runs `stage` on `f` with the first block's parameters.
fn run_stage(
    params: &ModelParams,
    shifted: bool,
    f: &Tensor,
    stage: impl Fn(
        &mut Tape,
        mclswt::autodiff::Var,
        &StageVars,
    ) -> mclswt::Result<mclswt::autodiff::Var>,
) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let sv = StageVars::from_bound(&bound, 0, shifted).unwrap();
    let x = tape.constant(f);
    let y = stage(&mut tape, x, &sv).unwrap();
    tape.value(y).clone()
}

#[test]
fn default_report_passes_except_linear1() {
    let cfg = SwtConfig::default();
    let params = ModelParams::init(&cfg, 0).unwrap();
    for batch in [1, 3] {
        let report = param_report(&params, &cfg, batch).unwrap();
        assert_eq!(report.count(RowStatus::Fail), 0, "{report}");
        let deviations: Vec<&str> = report
            .rows
            .iter()
            .filter(|r| r.status == RowStatus::KnownDeviation)
            .map(|r| r.layer.as_str())
            .collect();
        assert_eq!(deviations, vec!["Linear1"]);
        let find = |layer: &str| report.rows.iter().find(|r| r.layer == layer).unwrap();
        assert_eq!(find("Temporal Conv").shape, vec![batch, 40, 1096, 3]);
        assert_eq!(find("Temporal Conv").params, 1040);
        assert_eq!(find("Spatial Filter").params, 4840);
        assert_eq!(find("Feature Normalization").params, 80);
        assert_eq!(find("Query Projection").params, 1640);
        assert_eq!(find("Attention Score").shape, vec![batch, 8, 137, 8, 8]);
        assert_eq!(find("Linear2").shape, vec![batch, 2]);
        assert_eq!(find("Linear2").params, 82);
        assert_eq!(find("Linear1").params, 110_440);
        assert!(report
            .rows
            .iter()
            .filter(|r| r.layer == "Layer Norm")
            .all(|r| r.params == 80));
        let mlp: Vec<usize> = report
            .rows
            .iter()
            .filter(|r| r.layer == "Linear")
            .map(|r| r.params)
            .collect();
        assert_eq!(mlp, vec![6560, 6440, 6560, 6440]);
    }
}

#[test]
fn forward_shapes_and_distributions() {
    let cfg = SwtConfig::default();
    let params = ModelParams::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[3, 1, 1120, 3], 2.0, &mut rng);
    let (probs, emb) = predict(&params, &cfg, &x).unwrap();
    assert_eq!(probs.shape(), &[3, 2]);
    assert_eq!(emb.shape(), &[3, 2760]);
    for row in probs.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_input_gives_zero_features() {
    let cfg = SwtConfig::default();
    let params = ModelParams::init(&cfg, 4).unwrap();
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(&Tensor::zeros(&[2, 1, 1120, 3]));
        let (f, _) = feature_extract(
            &mut tape,
            x,
            &bound,
            params.running_stats(),
            mode,
            &mut Trace::disabled(),
        )
        .unwrap();
        assert_eq!(tape.shape(f), &[2, 1096, 40]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_output_projection_leaves_only_the_residual() {
    let cfg = SwtConfig::default();
    let mut params = ModelParams::init(&cfg, 5).unwrap();
    for shifted in [false, true] {
        let p = stage_prefix(0, shifted);
        zero(&mut params, &format!("{p}.attn.out.weight"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = Tensor::uniform(&[2, 1096, 40], 1.0, &mut rng);
    let tw = run_stage(&params, false, &f, |t, x, sv| tw_msa(t, x, sv, 8, 8));
    let stw = run_stage(&params, true, &f, |t, x, sv| stw_msa(t, x, sv, 8, 8));
    assert_eq!(tw.data(), f.data());
    assert_eq!(stw.data(), f.data());
}

#[test]
fn one_head_identity_projections() {
    let cfg = two_step_config();
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    let p = stage_prefix(0, false);
    for proj in ["query", "key", "value", "out"] {
        set(
            &mut params,
            &format!("{p}.attn.{proj}.weight"),
            &[1.0, 0.0, 0.0, 1.0],
        );
    }
    // Layer norm maps [1,0] to about [1,-1]; this affine maps that back to
    // about [1,0], so attention sees the raw rows.
    set(&mut params, &format!("{p}.ln1.gamma"), &[0.5, 0.5]);
    set(&mut params, &format!("{p}.ln1.beta"), &[0.5, 0.5]);
    let f = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = run_stage(&params, false, &f, |t, x, sv| tw_msa(t, x, sv, 1, 2));
    let attn: Vec<f64> = y.data().iter().zip(f.data()).map(|(a, b)| a - b).collect();
    // softmax([1, 0] / sqrt 2) = [0.6698, 0.3302]
    assert!((attn[0] - 0.6698).abs() < 1e-4, "{attn:?}");
    assert!((attn[1] - 0.3302).abs() < 1e-4, "{attn:?}");

    zero(&mut params, &format!("{p}.attn.out.weight"));
    let y = run_stage(&params, false, &f, |t, x, sv| tw_msa(t, x, sv, 1, 2));
    assert_eq!(y.data(), f.data());
}

#[test]
fn shifted_stage_keeps_constant_sequences_constant() {
    let cfg = SwtConfig::default();
    let params = ModelParams::init(&cfg, 6).unwrap();
    let step: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
    let f = Tensor::new(vec![1, 64, 40], step.repeat(64)).unwrap();
    let y = run_stage(&params, true, &f, |t, x, sv| stw_msa(t, x, sv, 8, 8));
    let first = &y.data()[..40];
    for row in y.data().chunks(40) {
        for (a, b) in row.iter().zip(first) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn shifted_stage_commutes_with_window_rolls() {
    let cfg = SwtConfig::default();
    let params = ModelParams::init(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, d) = (64, 40);
    let f = Tensor::uniform(&[2, l, d], 1.0, &mut rng);
    let roll = |t: &Tensor, k: usize| {
        let mut out = t.clone();
        for b in 0..2 {
            for s in 0..l {
                let src = &t.data()[(b * l + s) * d..(b * l + s + 1) * d];
                let dst = (b * l + (s + k) % l) * d;
                out.data_mut()[dst..dst + d].copy_from_slice(src);
            }
        }
        out
    };
    let stage = |x: &Tensor| run_stage(&params, true, x, |t, v, sv| stw_msa(t, v, sv, 8, 8));
    let a = stage(&roll(&f, 8));
    let b = roll(&stage(&f), 8);
    assert!(a.max_abs_diff(&b) < 1e-6);
}

#[test]
fn without_attention_and_mlp_branches_the_model_is_cnn_plus_classifier() {
    let cfg = SwtConfig::default();
    let mut params = ModelParams::init(&cfg, 9).unwrap();
    for shifted in [false, true] {
        let p = stage_prefix(0, shifted);
        for name in [
            "attn.out.weight",
            "attn.out.bias",
            "mlp.fc2.weight",
            "mlp.fc2.bias",
        ] {
            zero(&mut params, &format!("{p}.{name}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(&[2, 1, 1120, 3], 1.0, &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(&x);
    let full = forward(
        &mut tape,
        xv,
        &params,
        &bound,
        &cfg,
        NormMode::Eval,
        &mut Trace::disabled(),
    )
    .unwrap();
    let (f, _) = feature_extract(
        &mut tape,
        xv,
        &bound,
        params.running_stats(),
        NormMode::Eval,
        &mut Trace::disabled(),
    )
    .unwrap();
    let h = tape.permute(f, &[0, 2, 1]).unwrap();
    let h = tape.square(h).unwrap();
    let h = tape.avg_pool_time(h, 75, 15).unwrap();
    let h = tape.log(h, LOG_EPS).unwrap();
    let h = tape.reshape(h, &[2, 2760]).unwrap();
    let v = |n: &str| bound.var(n).unwrap();
    let h = tape
        .linear(
            h,
            v("classifier.linear1.weight"),
            v("classifier.linear1.bias"),
        )
        .unwrap();
    let h = tape.gelu(h).unwrap();
    let h = tape
        .linear(
            h,
            v("classifier.linear2.weight"),
            v("classifier.linear2.bias"),
        )
        .unwrap();
    let probs = tape.softmax_lastdim(h).unwrap();
    assert!(tape.value(full.probs).max_abs_diff(tape.value(probs)) < 1e-12);
}
