use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{predict, tw_msa, ModelParams, StageVars, SwtConfig};
use crate::tensor::Tensor;

/// Multiply-accumulate counts of dense and windowed self-attention over a
/// length-`l` sequence of width `d` with windows of `m`:
/// `(4ld² + 2l²d, 4ld² + 2m²ld)`.
pub fn flops_estimate(l: u64, d: u64, m: u64) -> (u64, u64) {
    let proj = 4 * l * d * d;
    (proj + 2 * l * l * d, proj + 2 * m * m * l * d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceBench {
    pub batch: usize,
    pub n_runs: usize,
    pub mean_ms: f64,
    pub params: usize,
}

/// Mean wall-clock of `n_runs` eval-mode forward passes after one warm-up.
pub fn bench_inference(
    params: &ModelParams,
    cfg: &SwtConfig,
    batch: usize,
    n_runs: usize,
) -> Result<InferenceBench> {
    if n_runs == 0 || batch == 0 {
        return Err(Error::Config(
            "bench needs at least one run and one trial".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(&[batch, 1, cfg.n_samples, cfg.n_channels], 1.0, &mut rng);
    predict(params, cfg, &x)?;
    let start = Instant::now();
    for _ in 0..n_runs {
        predict(params, cfg, &x)?;
    }
    Ok(InferenceBench {
        batch,
        n_runs,
        mean_ms: start.elapsed().as_secs_f64() * 1e3 / n_runs as f64,
        params: params.num_scalars(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTiming {
    pub len: usize,
    pub window: usize,
    /// Median forward time of the windowed stage.
    pub windowed_ms: f64,
    /// Median forward time of the same stage with one window spanning the
    /// whole sequence.
    pub dense_ms: f64,
}

fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64() * 1e3);
    }
    t.sort_by(f64::total_cmp);
    Ok(t[t.len() / 2])
}

/// Times the first attention stage of `params` (layer norm, projections,
/// attention, output projection, residual) on random `[batch, L, D]` input
/// for each `L` in `lens`.
pub fn bench_attention_scaling(
    params: &ModelParams,
    cfg: &SwtConfig,
    batch: usize,
    lens: &[usize],
    reps: usize,
) -> Result<Vec<AttentionTiming>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let sv = StageVars::from_bound(&bound, 0, false)?;
    let base = tape.len();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::with_capacity(lens.len());
    for &len in lens {
        if len % cfg.window != 0 {
            return Err(Error::Window(format!(
                "length {len} is not a multiple of the window {}",
                cfg.window
            )));
        }
        let x = Tensor::uniform(&[batch, len, cfg.n_filters], 1.0, &mut rng);
        let mut run = |window: usize| {
            tape.truncate(base);
            let f = tape.constant(&x);
            tw_msa(&mut tape, f, &sv, cfg.heads, window).map(|_| ())
        };
        let windowed_ms = median_ms(reps, || run(cfg.window))?;
        let dense_ms = median_ms(reps, || run(len))?;
        out.push(AttentionTiming {
            len,
            window: cfg.window,
            windowed_ms,
            dense_ms,
        });
    }
    Ok(out)
}
