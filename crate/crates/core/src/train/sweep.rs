use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::csv_err;
use super::{evaluate, train, TrainConfig};
use crate::data::trial::TrialSet;
use crate::error::{Error, Result};
use crate::mirror::ChannelMirrorMap;
use crate::model::{ModelParams, SwtConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub heads: Vec<usize>,
    pub n_blocks: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            heads: vec![4, 8, 10],
            n_blocks: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub heads: usize,
    pub n_blocks: usize,
    pub accuracy: f64,
    pub kappa: f64,
}

/// Trains one model per `(heads, n_blocks)` cell, all from `init_seed`,
/// and reports the fused test metrics after the last epoch.
#[allow(clippy::too_many_arguments)]
pub fn hyper_sweep(
    grid: &SweepGrid,
    base: &SwtConfig,
    tc: &TrainConfig,
    trainset: &TrialSet,
    testset: &TrialSet,
    map: &ChannelMirrorMap,
    init_seed: u64,
    mut on_cell: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if grid.heads.is_empty() || grid.n_blocks.is_empty() {
        return Err(Error::Config("sweep grid has an empty axis".into()));
    }
    let mut rows = Vec::with_capacity(grid.heads.len() * grid.n_blocks.len());
    for &heads in &grid.heads {
        for &n_blocks in &grid.n_blocks {
            let cfg = SwtConfig {
                heads,
                n_blocks,
                ..base.clone()
            };
            let params = ModelParams::init(&cfg, init_seed)?;
            let (params, _) = train(params, &cfg, trainset, None, tc, map, |_| {})?;
            let r = evaluate(&params, &cfg, testset, map)?;
            let row = SweepRow {
                heads,
                n_blocks,
                accuracy: r.accuracy,
                kappa: r.kappa,
            };
            on_cell(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
