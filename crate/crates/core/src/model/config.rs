use alloc::format;

use crate::error::{Error, Result};

/// Shape and capacity hyper-parameters of the forecaster.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    /// Look-back window length `L`.
    pub lookback: usize,
    /// Forecast horizon `T`.
    pub horizon: usize,
    /// Number of channels `D`.
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    /// Most recent time-domain patches kept in the joint representation.
    pub n_t: usize,
    /// Frequency components; zero disables the frequency branch.
    pub n_f: usize,
    pub d_m: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_width: usize,
    pub lra_layers: usize,
    /// Router length `d_r` of the low-rank cross-channel attention.
    pub d_r: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 336,
            horizon: 96,
            channels: 7,
            patch_len: 16,
            stride: 8,
            n_t: 32,
            n_f: 16,
            d_m: 128,
            heads: 8,
            encoder_layers: 3,
            ffn_width: 256,
            lra_layers: 1,
            d_r: 4,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    /// Width of one attention head.
    pub fn head_dim(&self) -> usize {
        self.d_m / self.heads.max(1)
    }

    /// Patch count with end padding, `floor((L - P) / S) + 2`.
    pub fn patch_count(&self) -> usize {
        patch_count(self.lookback, self.patch_len, self.stride)
    }

    /// Sequence length seen by the encoder, `n_t + n_f`.
    pub fn seq_len(&self) -> usize {
        self.n_t + self.n_f
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.channels == 0 || self.horizon == 0 {
            return fail(format!("channels ({}) and horizon ({}) must be positive", self.channels, self.horizon));
        }
        if self.patch_len == 0 || self.stride == 0 {
            return fail(format!("patch_len ({}) and stride ({}) must be positive", self.patch_len, self.stride));
        }
        if self.lookback < self.patch_len.max(2) {
            return fail(format!("lookback {} is shorter than patch_len {}", self.lookback, self.patch_len));
        }
        let m = self.patch_count();
        if self.n_t == 0 || self.n_t > m {
            return fail(format!("n_t = {} must lie in 1..={m} (patch count)", self.n_t));
        }
        if self.d_m == 0 || self.heads == 0 || !self.d_m.is_multiple_of(self.heads) {
            return fail(format!("d_m = {} must be a positive multiple of heads = {}", self.d_m, self.heads));
        }
        if self.ffn_width == 0 {
            return fail("ffn_width must be positive".into());
        }
        if self.lra_layers > 0 && self.d_r == 0 {
            return fail("d_r must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Number of patches produced by [`super::patchify`].
pub fn patch_count(lookback: usize, patch_len: usize, stride: usize) -> usize {
    if lookback < patch_len || stride == 0 {
        0
    } else {
        (lookback - patch_len) / stride + 2
    }
}
