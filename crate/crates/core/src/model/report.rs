//! Layer-by-layer shape and parameter report against the reference layer
//! table of the default configuration.

use std::fmt;

use serde::Serialize;

use crate::autodiff::{NormMode, Tape};
use crate::error::Result;
use crate::tensor::Tensor;

use super::config::SwtConfig;
use super::params::ModelParams;
use super::swt::{forward, LayerRecord, Trace};

/// Reference row: layer name, output shape without the batch axis, and
/// learnable parameter count.
pub struct ReferenceRow {
    pub block: &'static str,
    pub layer: &'static str,
    pub shape: &'static [usize],
    pub params: usize,
}

const fn row(
    block: &'static str,
    layer: &'static str,
    shape: &'static [usize],
    params: usize,
) -> ReferenceRow {
    ReferenceRow {
        block,
        layer,
        shape,
        params,
    }
}

const STAGE: &str = "(S)TW-MSA";

/// Reference layer table for the default configuration (batch axis omitted).
pub const REFERENCE_TABLE: &[ReferenceRow] = &[
    row("Input", "Input", &[1, 1120, 3], 0),
    row(
        "Feature Extraction Block",
        "Temporal Conv",
        &[40, 1096, 3],
        1040,
    ),
    row(
        "Feature Extraction Block",
        "Spatial Filter",
        &[40, 1096, 1],
        4840,
    ),
    row(
        "Feature Extraction Block",
        "Feature Normalization",
        &[40, 1096, 1],
        80,
    ),
    row("Feature Extraction Block", "Rearrange", &[1096, 40], 0),
    row(STAGE, "Layer Norm", &[1096, 40], 80),
    row(STAGE, "Query Projection", &[1096, 40], 1640),
    row(STAGE, "Key Projection", &[1096, 40], 1640),
    row(STAGE, "Value Projection", &[1096, 40], 1640),
    row(STAGE, "Attention Score", &[8, 137, 8, 8], 0),
    row(STAGE, "Projection", &[1096, 40], 1640),
    row(STAGE, "Concatenate", &[1096, 40], 0),
    row(STAGE, "Residual Add", &[1096, 40], 0),
    row(STAGE, "Layer Norm", &[1096, 40], 80),
    row(STAGE, "Linear", &[1096, 160], 6560),
    row(STAGE, "GELU", &[1096, 160], 0),
    row(STAGE, "Linear", &[1096, 40], 6440),
    row(STAGE, "Residual Add", &[1096, 40], 0),
    row(STAGE, "Layer Norm", &[1096, 40], 80),
    row(STAGE, "Query Projection", &[1096, 40], 1640),
    row(STAGE, "Key Projection", &[1096, 40], 1640),
    row(STAGE, "Value Projection", &[1096, 40], 1640),
    row(STAGE, "Attention Score", &[8, 137, 8, 8], 0),
    row(STAGE, "Projection", &[1096, 40], 1640),
    row(STAGE, "Concatenate", &[1096, 40], 0),
    row(STAGE, "Residual Add", &[1096, 40], 0),
    row(STAGE, "Layer Norm", &[1096, 40], 80),
    row(STAGE, "Linear", &[1096, 160], 6560),
    row(STAGE, "GELU", &[1096, 160], 0),
    row(STAGE, "Linear", &[1096, 40], 6440),
    row(STAGE, "Residual Add", &[1096, 40], 0),
    row("Classification Block", "Average Pool", &[40, 69], 0),
    row("Classification Block", "Log", &[40, 69], 0),
    row("Classification Block", "Linear1", &[40], 109_640),
    row("Classification Block", "Gelu", &[40], 0),
    row("Classification Block", "Linear2", &[2], 82),
];

/// Rows whose parameter count is known to differ from the reference:
/// Linear1 takes the 40 × 69 = 2760-wide flattened pool output, which gives
/// 2760 · 40 + 40 = 110440 parameters rather than the tabulated 109640.
pub const KNOWN_DEVIATIONS: &[(&str, usize)] = &[("Linear1", 110_440)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RowStatus {
    Pass,
    KnownDeviation,
    Fail,
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowStatus::Pass => "PASS",
            RowStatus::KnownDeviation => "KNOWN-DEVIATION",
            RowStatus::Fail => "FAIL",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportRow {
    pub block: String,
    pub layer: String,
    pub shape: Vec<usize>,
    pub params: usize,
    pub expected_shape: Option<Vec<usize>>,
    pub expected_params: Option<usize>,
    pub status: RowStatus,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub batch: usize,
    pub rows: Vec<ReportRow>,
    pub total_params: usize,
}

impl ParamReport {
    pub fn count(&self, status: RowStatus) -> usize {
        self.rows.iter().filter(|r| r.status == status).count()
    }

    pub fn all_conformant(&self) -> bool {
        self.count(RowStatus::Fail) == 0
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<26} {:<22} {:<24} {:>8}  status",
            "block", "layer", "output shape", "params"
        )?;
        for r in &self.rows {
            let mut status = r.status.to_string();
            if r.status != RowStatus::Pass {
                if let (Some(es), Some(ep)) = (&r.expected_shape, r.expected_params) {
                    status.push_str(&format!(" (reference {es:?}, {ep})"));
                }
            }
            writeln!(
                f,
                "{:<26} {:<22} {:<24} {:>8}  {}",
                r.block,
                r.layer,
                format!("{:?}", r.shape),
                r.params,
                status
            )?;
        }
        writeln!(f, "total learnable parameters: {}", self.total_params)?;
        write!(
            f,
            "{} PASS, {} KNOWN-DEVIATION, {} FAIL",
            self.count(RowStatus::Pass),
            self.count(RowStatus::KnownDeviation),
            self.count(RowStatus::Fail)
        )
    }
}

/// Traces one forward pass of a zero input with `batch` trials and reports
/// each layer's output shape and parameter count.
pub fn trace_layers(
    params: &ModelParams,
    cfg: &SwtConfig,
    batch: usize,
) -> Result<Vec<LayerRecord>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(&Tensor::zeros(&[batch, 1, cfg.n_samples, cfg.n_channels]));
    let mut trace = Trace::enabled();
    forward(
        &mut tape,
        x,
        params,
        &bound,
        cfg,
        NormMode::Eval,
        &mut trace,
    )?;
    Ok(trace.records)
}

/// Compares a layer trace against [`REFERENCE_TABLE`].
pub fn compare_to_reference(
    records: &[LayerRecord],
    batch: usize,
    total_params: usize,
) -> ParamReport {
    let mut rows = Vec::with_capacity(records.len().max(REFERENCE_TABLE.len()));
    let n = records.len().max(REFERENCE_TABLE.len());
    for i in 0..n {
        let rec = records.get(i);
        let reference = REFERENCE_TABLE.get(i);
        let expected_shape = reference.map(|r| {
            let mut s = vec![batch];
            s.extend_from_slice(r.shape);
            s
        });
        let status = match (rec, reference) {
            (Some(rec), Some(reference)) => {
                let shape_ok = Some(&rec.shape) == expected_shape.as_ref()
                    && rec.layer == reference.layer
                    && rec.block == reference.block;
                let known = KNOWN_DEVIATIONS
                    .iter()
                    .any(|&(layer, params)| layer == rec.layer && params == rec.params);
                if shape_ok && rec.params == reference.params {
                    RowStatus::Pass
                } else if shape_ok && known {
                    RowStatus::KnownDeviation
                } else {
                    RowStatus::Fail
                }
            }
            _ => RowStatus::Fail,
        };
        rows.push(ReportRow {
            block: rec
                .map(|r| r.block.clone())
                .unwrap_or_else(|| reference.map(|r| r.block.to_string()).unwrap_or_default()),
            layer: rec
                .map(|r| r.layer.clone())
                .unwrap_or_else(|| reference.map(|r| r.layer.to_string()).unwrap_or_default()),
            shape: rec.map(|r| r.shape.clone()).unwrap_or_default(),
            params: rec.map(|r| r.params).unwrap_or(0),
            expected_shape,
            expected_params: reference.map(|r| r.params),
            status,
        });
    }
    ParamReport {
        batch,
        rows,
        total_params,
    }
}

/// Layer table for `params`, checked against the reference table.
pub fn param_report(params: &ModelParams, cfg: &SwtConfig, batch: usize) -> Result<ParamReport> {
    let records = trace_layers(params, cfg, batch)?;
    Ok(compare_to_reference(&records, batch, params.num_scalars()))
}
