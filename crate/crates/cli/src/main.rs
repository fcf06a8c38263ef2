mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Command};
use mclswt::data::{
    generate_synthetic_erd, read_trialset, split_new_subject, write_trialset, TrialSet,
};
use mclswt::gradcheck::run_suite;
use mclswt::mirror::ChannelMirrorMap;
use mclswt::model::{checkpoint, param_report, ModelParams, RowStatus};
use mclswt::signal::{bandpass, sliding_standardize, ContinuousRecording};
use mclswt::train::{
    bench_attention_scaling, bench_inference, evaluate, flops_estimate, hyper_sweep,
    pair_separation, train, write_sweep_csv,
};

use config::{RunConfig, FLAGS, SEED_ENV};

fn cli() -> Command {
    let mut cmd = Command::new("mclswt")
        .about("Sliding-window transformer with mirror contrastive learning for motor imagery EEG")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("JSON run configuration; flags override its values"),
        )
        .subcommand(Command::new("synth").about("Generate the synthetic trial set"))
        .subcommand(
            Command::new("train").about("Train on the training subjects and save a checkpoint"),
        )
        .subcommand(Command::new("eval").about("Evaluate a checkpoint on the test subjects"))
        .subcommand(Command::new("bench").about("Time inference and windowed vs dense attention"))
        .subcommand(Command::new("shapes").about("Per-layer output shapes and parameter counts"))
        .subcommand(Command::new("gradcheck").about("Finite-difference gradient checks"))
        .subcommand(Command::new("sweep").about("Train over a grid of head and block counts"));
    for (flag, pointer) in FLAGS {
        cmd = cmd.arg(
            Arg::new(*flag)
                .long(*flag)
                .global(true)
                .value_name("VALUE")
                .help(format!("sets {pointer}")),
        );
    }
    cmd
}

fn resolve(m: &ArgMatches) -> Result<RunConfig> {
    let overrides: Vec<(&str, String)> = FLAGS
        .iter()
        .filter_map(|(flag, _)| m.get_one::<String>(flag).map(|v| (*flag, v.clone())))
        .collect();
    let env = std::env::var(SEED_ENV).ok();
    config::resolve(
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        env.as_deref(),
        &overrides,
    )
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<TrialSet> {
    let path = &cfg.paths.data;
    let mut ts = read_trialset(path)
        .with_context(|| format!("reading {} (run `mclswt synth` first?)", path.display()))?;
    if cfg.preprocess.enabled {
        preprocess(&mut ts, cfg)?;
    }
    if ts.n_samples != cfg.model.n_samples || ts.n_channels() != cfg.model.n_channels {
        bail!(
            "trials are {} samples x {} channels but the model expects {} x {}",
            ts.n_samples,
            ts.n_channels(),
            cfg.model.n_samples,
            cfg.model.n_channels
        );
    }
    Ok(ts)
}

/// Filters and standardizes each trial on its own.
fn preprocess(ts: &mut TrialSet, cfg: &RunConfig) -> Result<()> {
    let p = &cfg.preprocess;
    for t in &mut ts.trials {
        let rec = ContinuousRecording::new(t.data().to_vec(), ts.fs_hz, ts.channel_names.clone())?;
        let mut rec = bandpass(&rec, p.low_hz, p.high_hz)?;
        if p.standardize {
            rec = sliding_standardize(&rec, p.decay, p.eps)?;
        }
        t.data_mut().copy_from_slice(&rec.samples);
    }
    Ok(())
}

fn split(cfg: &RunConfig, ts: &TrialSet) -> Result<(TrialSet, TrialSet, ChannelMirrorMap)> {
    let (train_ids, test_ids) = cfg.split.sets();
    let (a, b) = split_new_subject(ts, &train_ids, &test_ids)?;
    let map = ChannelMirrorMap::from_names(&ts.channel_names, &cfg.mirror.pairs)?;
    Ok((a, b, map))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let ts = generate_synthetic_erd(&cfg.synth)?;
    ensure_parent(&cfg.paths.data)?;
    write_trialset(&ts, &cfg.paths.data)?;
    println!(
        "wrote {} trials ({} subjects, {} samples x {} channels) to {}",
        ts.len(),
        cfg.synth.n_subjects,
        ts.n_samples,
        ts.n_channels(),
        cfg.paths.data.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ts = load_data(cfg)?;
    let (trainset, testset, map) = split(cfg, &ts)?;
    println!(
        "train {} trials, test {} trials",
        trainset.len(),
        testset.len()
    );
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let test = (!testset.is_empty()).then_some(&testset);
    let (params, report) = train(params, &cfg.model, &trainset, test, &cfg.train, &map, |m| {
        let acc = m
            .test_accuracy
            .map_or(String::new(), |a| format!(" acc {a:.4}"));
        let kappa = m
            .test_kappa
            .map_or(String::new(), |k| format!(" kappa {k:.4}"));
        println!(
            "epoch {:>4}  l_c {:.5}  l_d {:.5}  l_total {:.5}{acc}{kappa}  {:.1}s",
            m.epoch, m.l_c, m.l_d, m.l_total, m.wall_clock_s
        );
    })?;
    for path in [
        &cfg.paths.checkpoint,
        &cfg.paths.metrics_csv,
        &cfg.paths.summary_json,
    ] {
        ensure_parent(path)?;
    }
    checkpoint::save(&cfg.paths.checkpoint, &cfg.model, &params)?;
    report.write_csv(&cfg.paths.metrics_csv)?;
    report.write_summary_json(&cfg.paths.summary_json)?;
    println!("status: {}", serde_json::to_string(&report.status)?);
    println!("summary: {}", serde_json::to_string(&report.summary)?);
    println!("checkpoint: {}", cfg.paths.checkpoint.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let ts = load_data(cfg)?;
    let (_, testset, map) = split(cfg, &ts)?;
    let (model, params) = checkpoint::load(&cfg.paths.checkpoint)
        .with_context(|| format!("loading {}", cfg.paths.checkpoint.display()))?;
    let r = evaluate(&params, &model, &testset, &map)?;
    let sep = pair_separation(&params, &model, &testset.trials, &map)?;
    println!("test trials: {}", testset.len());
    println!("accuracy: {:.4}", r.accuracy);
    println!("kappa: {:.4}", r.kappa);
    println!("confusion [truth][predicted]: {:?}", r.confusion.counts);
    println!(
        "mean pair distance: positive {:.4}, negative {:.4}",
        sep.mean_positive, sep.mean_negative
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let b = &cfg.bench;
    let inf = bench_inference(&params, &cfg.model, b.batch, b.n_runs)?;
    println!(
        "inference: {:.3} ms per batch of {} over {} runs ({} parameters)",
        inf.mean_ms, inf.batch, inf.n_runs, inf.params
    );
    let timings = bench_attention_scaling(&params, &cfg.model, b.batch, &b.lens, b.reps)?;
    ensure_parent(&cfg.paths.bench_csv)?;
    let mut out = fs::File::create(&cfg.paths.bench_csv)?;
    writeln!(
        out,
        "len,window,windowed_ms,dense_ms,windowed_flops,dense_flops"
    )?;
    let d = cfg.model.n_filters as u64;
    for t in &timings {
        let (dense, windowed) = flops_estimate(t.len as u64, d, t.window as u64);
        println!(
            "L={:>6}  windowed {:>9.3} ms  dense {:>9.3} ms  flops {windowed} vs {dense}",
            t.len, t.windowed_ms, t.dense_ms
        );
        writeln!(
            out,
            "{},{},{},{},{windowed},{dense}",
            t.len, t.window, t.windowed_ms, t.dense_ms
        )?;
    }
    Ok(())
}

fn cmd_shapes(cfg: &RunConfig) -> Result<()> {
    let params = ModelParams::init(&cfg.model, cfg.seed)?;
    let report = param_report(&params, &cfg.model, cfg.train.batch_size)?;
    println!("{report}");
    if report.count(RowStatus::Fail) > 0 {
        bail!(
            "{} layers differ from the reference",
            report.count(RowStatus::Fail)
        );
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let g = &cfg.gradcheck;
    let op_seeds: Vec<u64> = (0..g.op_seeds).map(|i| cfg.seed + i).collect();
    let model_seeds: Vec<u64> = (0..g.model_seeds).map(|i| cfg.seed + i).collect();
    let results = run_suite(&op_seeds, &model_seeds)?;
    let mut failed = 0;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict}  {:<28} max rel {:.3e}  max abs {:.3e}  tol {:.0e}  ({} runs, {} entries)",
            r.name, r.max_rel_err, r.max_abs_err, r.tolerance, r.runs, r.entries
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", results.len());
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let ts = load_data(cfg)?;
    let (trainset, testset, map) = split(cfg, &ts)?;
    let rows = hyper_sweep(
        &cfg.sweep,
        &cfg.model,
        &cfg.train,
        &trainset,
        &testset,
        &map,
        cfg.seed,
        |r| {
            println!(
                "heads {:>2}  blocks {}  accuracy {:.4}  kappa {:.4}",
                r.heads, r.n_blocks, r.accuracy, r.kappa
            )
        },
    )?;
    ensure_parent(&cfg.paths.sweep_csv)?;
    write_sweep_csv(&rows, &cfg.paths.sweep_csv)?;
    Ok(())
}

fn run() -> Result<()> {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "synth" => cmd_synth(&cfg),
        "train" => cmd_train(&cfg),
        "eval" => cmd_eval(&cfg),
        "bench" => cmd_bench(&cfg),
        "shapes" => cmd_shapes(&cfg),
        "gradcheck" => cmd_gradcheck(&cfg),
        "sweep" => cmd_sweep(&cfg),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
