//! Per-window preprocessing: instance normalization and patching.

use alloc::vec::Vec;

use super::config::patch_count;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Floor applied to the per-channel standard deviation.
pub const NORM_EPS: f64 = 1e-5;

/// Per-row statistics captured by [`instance_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// Shape of the leading axes (everything but time).
    pub shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        NormStats { shape: shape.to_vec(), mean: alloc::vec![0.0; n], std: alloc::vec![1.0; n] }
    }
}

/// Standardizes every series along the last axis with its own mean and
/// population standard deviation (floored at [`NORM_EPS`]).
pub fn instance_normalize(x: &Tensor) -> Result<(Tensor, NormStats)> {
    let shape = x.shape();
    let Some((&len, lead)) = shape.split_last() else {
        return Err(dim_err!("instance_normalize needs at least one axis"));
    };
    if len < 2 {
        return Err(Error::Data(alloc::format!("cannot normalize series of length {len}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for row in x.data().chunks_exact(len) {
        let m = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
        let s = libm::sqrt(var).max(NORM_EPS);
        out.extend(row.iter().map(|v| (v - m) / s));
        mean.push(m);
        std.push(s);
    }
    Ok((Tensor::new(shape, out)?, NormStats { shape: lead.to_vec(), mean, std }))
}

/// Inverse of [`instance_normalize`]: `y·std + mean` per series.
pub fn denormalize(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let shape = y.shape();
    match shape.split_last() {
        Some((&len, lead)) if lead == stats.shape.as_slice() => {
            let mut out = y.data().to_vec();
            for (i, row) in out.chunks_exact_mut(len).enumerate() {
                row.iter_mut().for_each(|v| *v = *v * stats.std[i] + stats.mean[i]);
            }
            Tensor::new(shape, out)
        }
        _ => Err(dim_err!("stats for {:?} do not match output {:?}", stats.shape, shape)),
    }
}

/// Patches of every series, `[..., M, P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Tensor,
    /// Whether the last patch was formed from end-replicated values.
    pub padded: bool,
}

impl PatchSet {
    pub fn count(&self) -> usize {
        let s = self.patches.shape();
        s[s.len() - 2]
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[self.patches.shape().len() - 1]
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Sliding windows of length `patch_len` at offsets `0, S, 2S, …` over the
/// series end-padded with `S` copies of its last value.
pub fn patchify(x: &Tensor, patch_len: usize, stride: usize) -> Result<PatchSet> {
    let shape = x.shape();
    let Some((&len, lead)) = shape.split_last() else {
        return Err(dim_err!("patchify needs at least one axis"));
    };
    if stride == 0 {
        return Err(Error::Config("patch stride must be positive".into()));
    }
    if patch_len == 0 || len < patch_len {
        return Err(Error::Data(alloc::format!("series of length {len} is shorter than patch length {patch_len}")));
    }
    let m = patch_count(len, patch_len, stride);
    let mut out = Vec::with_capacity(x.numel() / len * m * patch_len);
    for row in x.data().chunks_exact(len) {
        for p in 0..m {
            let start = p * stride;
            out.extend((start..start + patch_len).map(|t| row[t.min(len - 1)]));
        }
    }
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, patch_len]);
    Ok(PatchSet { patches: Tensor::new(&out_shape, out)?, padded: true })
}
