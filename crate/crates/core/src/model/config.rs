use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the sliding-window transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwtConfig {
    /// Samples per trial (T of the input `[B, 1, T, C]`).
    pub n_samples: usize,
    /// EEG channels per trial.
    pub n_channels: usize,
    /// Length of the temporal convolution kernel.
    pub temporal_kernel: usize,
    /// Width of the spatial convolution kernel; must span all channels.
    pub spatial_kernel: usize,
    /// Convolution filters, which is also the attention model width.
    pub n_filters: usize,
    /// Attention window length M.
    pub window: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub n_classes: usize,
}

impl Default for SwtConfig {
    fn default() -> Self {
        SwtConfig {
            n_samples: 1120,
            n_channels: 3,
            temporal_kernel: 25,
            spatial_kernel: 3,
            n_filters: 40,
            window: 8,
            heads: 8,
            n_blocks: 1,
            mlp_hidden: 160,
            pool_kernel: 75,
            pool_stride: 15,
            n_classes: 2,
        }
    }
}

impl SwtConfig {
    /// Sequence length after the temporal convolution.
    pub fn seq_len(&self) -> usize {
        self.n_samples + 1 - self.temporal_kernel
    }

    pub fn head_dim(&self) -> usize {
        self.n_filters / self.heads
    }

    pub fn pooled_len(&self) -> usize {
        (self.seq_len() - self.pool_kernel) / self.pool_stride + 1
    }

    /// Width of the flattened log-pooled feature fed to the classifier.
    pub fn embedding_dim(&self) -> usize {
        self.n_filters * self.pooled_len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_samples", self.n_samples),
            ("n_channels", self.n_channels),
            ("temporal_kernel", self.temporal_kernel),
            ("spatial_kernel", self.spatial_kernel),
            ("n_filters", self.n_filters),
            ("window", self.window),
            ("heads", self.heads),
            ("n_blocks", self.n_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("pool_kernel", self.pool_kernel),
            ("pool_stride", self.pool_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.temporal_kernel > self.n_samples {
            return Err(Error::Config(format!(
                "temporal_kernel {} exceeds n_samples {}",
                self.temporal_kernel, self.n_samples
            )));
        }
        if self.spatial_kernel != self.n_channels {
            return Err(Error::Config(format!(
                "spatial_kernel {} must equal n_channels {} so the spatial filter collapses all channels",
                self.spatial_kernel, self.n_channels
            )));
        }
        if !self.n_filters.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "n_filters {} must be divisible by heads {}",
                self.n_filters, self.heads
            )));
        }
        let len = self.seq_len();
        if !len.is_multiple_of(self.window) {
            return Err(Error::Config(format!(
                "sequence length {len} (n_samples - temporal_kernel + 1) must be divisible by window {}",
                self.window
            )));
        }
        if !self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "window {} must be even so the shifted stage can move by window/2",
                self.window
            )));
        }
        if self.pool_kernel > len {
            return Err(Error::Config(format!(
                "pool_kernel {} exceeds sequence length {len}",
                self.pool_kernel
            )));
        }
        if self.n_classes != 2 {
            return Err(Error::Config(format!(
                "n_classes must be 2 (left/right), got {}",
                self.n_classes
            )));
        }
        Ok(())
    }
}
