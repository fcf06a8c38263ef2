//! The sliding-window transformer: configuration, parameters, forward pass,
//! mirror fusion, layer report and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod params;
pub mod report;
pub mod swt;

pub use config::SwtConfig;
pub use params::{BoundParams, ModelParams};
pub use report::{param_report, ParamReport, RowStatus};
pub use swt::{
    feature_extract, forward, fuse_mirror_predictions, mlp_block, predict, stw_msa, swap_classes,
    tw_msa, ForwardOutput, StageVars, Trace,
};
