//! Reconstruction study: how much of a window survives a `k_max`-term
//! frequency representation.
//!
//! * TOPF keeps DC plus the strongest grid frequencies and inverts with the DCT.
//! * RNDF keeps DC plus uniformly random grid frequencies.
//! * LRNF learns the frequencies together with a linear recovery map.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    build_cdct_matrix, cdct_on_tape, constrain_frequencies, init_frequencies_topk, mean_abs_spectrum,
    top_grid_indices, DctBasis, FrequencySet,
};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{AdamState, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Method {
    #[cfg_attr(feature = "serde", serde(rename = "LRNF"))]
    Lrnf,
    #[cfg_attr(feature = "serde", serde(rename = "RNDF"))]
    Rndf,
    #[cfg_attr(feature = "serde", serde(rename = "TOPF"))]
    Topf,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Lrnf => "LRNF",
            Method::Rndf => "RNDF",
            Method::Topf => "TOPF",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionReport {
    pub method: Method,
    pub k_max: usize,
    /// Mean normalized MSE (over seeds for RNDF).
    pub nmse: f64,
    /// Population standard deviation across seeds; zero for single runs.
    pub nmse_std: f64,
    pub per_seed: Vec<f64>,
}

impl ReconstructionReport {
    pub fn seeds(&self) -> usize {
        self.per_seed.len()
    }

    fn single(method: Method, k_max: usize, nmse: f64) -> Self {
        ReconstructionReport { method, k_max, nmse, nmse_std: 0.0, per_seed: vec![nmse] }
    }
}

/// `Σ‖rec − z‖² / Σ‖z‖²`.
pub fn normalized_mse(reconstruction: &[f64], original: &[f64]) -> f64 {
    let err: f64 = reconstruction.iter().zip(original).map(|(r, z)| (r - z) * (r - z)).sum();
    let energy: f64 = original.iter().map(|z| z * z).sum();
    if energy == 0.0 {
        if err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        err / energy
    }
}

/// Cuts each column of a row-major `rows × columns` table into consecutive
/// non-overlapping windows of `len` samples; trailing samples are dropped.
/// Windows are ordered column by column.
pub fn windows_from_columns(table: &Tensor, len: usize) -> Result<Tensor> {
    let &[rows, cols] = table.shape() else {
        return Err(dim_err!("expected a rows×columns table, got {:?}", table.shape()));
    };
    if len == 0 || rows < len {
        return Err(Error::Data(alloc::format!("series of {rows} rows is shorter than window {len}")));
    }
    let per = rows / len;
    let mut data = Vec::with_capacity(per * cols * len);
    for c in 0..cols {
        for w in 0..per {
            data.extend((w * len..(w + 1) * len).map(|r| table.data()[r * cols + c]));
        }
    }
    Tensor::new(&[per * cols, len], data)
}

fn window_dims(windows: &Tensor, k_max: usize) -> Result<(usize, usize)> {
    let &[count, n] = windows.shape() else {
        return Err(dim_err!("expected a W×N window matrix, got {:?}", windows.shape()));
    };
    if k_max == 0 || k_max > n {
        return Err(Error::Parameter(alloc::format!("k_max = {k_max} must lie in 1..={n}")));
    }
    Ok((count, n))
}

/// nMSE of an IDCT reconstruction that keeps only `keep` grid indices.
fn masked_dct_nmse(windows: &Tensor, keep: &[usize]) -> Result<f64> {
    let n = windows.shape()[1];
    let basis = DctBasis::new(n)?;
    let mut coeffs = basis.forward_rows(windows.data());
    let mut mask = vec![false; n];
    keep.iter().for_each(|&k| mask[k] = true);
    for row in coeffs.chunks_exact_mut(n) {
        row.iter_mut().zip(&mask).for_each(|(c, &m)| {
            if !m {
                *c = 0.0
            }
        });
    }
    let rec = basis.inverse_rows(&coeffs);
    Ok(normalized_mse(&rec, windows.data()))
}

/// DC plus the `k_max - 1` strongest grid frequencies, inverted with the DCT.
pub fn reconstruct_topf(windows: &Tensor, k_max: usize) -> Result<ReconstructionReport> {
    window_dims(windows, k_max)?;
    let score = mean_abs_spectrum(windows)?;
    let mut keep = vec![0];
    keep.extend(top_grid_indices(&score, k_max - 1));
    Ok(ReconstructionReport::single(Method::Topf, k_max, masked_dct_nmse(windows, &keep)?))
}

/// DC plus `k_max - 1` distinct uniformly random grid frequencies, one
/// corpus-wide selection per seed (`base_seed + s` for `s in 0..seeds`).
pub fn reconstruct_rndf(windows: &Tensor, k_max: usize, seeds: usize, base_seed: u64) -> Result<ReconstructionReport> {
    let (_, n) = window_dims(windows, k_max)?;
    if seeds == 0 {
        return Err(Error::Parameter("RNDF needs at least one seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds);
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(s));
        let mut keep = vec![0];
        if k_max > 1 {
            keep.extend(sample(&mut rng, n - 1, k_max - 1).into_iter().map(|i| i + 1));
        }
        per_seed.push(masked_dct_nmse(windows, &keep)?);
    }
    let mean = per_seed.iter().sum::<f64>() / seeds as f64;
    let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / seeds as f64;
    Ok(ReconstructionReport { method: Method::Rndf, k_max, nmse: mean, nmse_std: libm::sqrt(var), per_seed })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrnfOptions {
    pub steps: usize,
    pub lr: f64,
    /// Windows per step; `None` uses the whole corpus every step.
    pub batch: Option<usize>,
}

impl Default for LrnfOptions {
    fn default() -> Self {
        LrnfOptions { steps: 2000, lr: 1e-3, batch: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrnfFit {
    pub frequencies: FrequencySet,
    /// Maps `k_max` coefficients back to `N` samples (`N × k_max`).
    pub recovery: Tensor,
    pub report: ReconstructionReport,
    pub initial_nmse: f64,
}

fn lrnf_nmse(windows: &Tensor, psi: &[f64], recovery: &Tensor) -> Result<f64> {
    let n = windows.shape()[1];
    let k = psi.len();
    let cdct = build_cdct_matrix(&FrequencySet::new(psi.to_vec(), true)?, n)?;
    let coeffs = super::cdct_apply(&cdct, windows)?;
    let mut rec = vec![0.0; windows.numel()];
    crate::tensor::kernels::mm_nt(coeffs.data(), recovery.data(), &mut rec, windows.shape()[0], k, n);
    Ok(normalized_mse(&rec, windows.data()))
}

/// Jointly learns `k_max` frequencies and a linear recovery map minimizing
/// the reconstruction error of `windows` (`W × N`).
///
/// Frequencies start from [`init_frequencies_topk`] and the recovery map from
/// `T̂ᵀ` of that initial basis, so the starting point equals TOPF.
pub fn fit_lrnf<R: Rng + ?Sized>(
    windows: &Tensor,
    k_max: usize,
    opts: &LrnfOptions,
    rng: &mut R,
) -> Result<LrnfFit> {
    let (count, n) = window_dims(windows, k_max)?;
    if count < 2 {
        return Err(Error::Data("LRNF needs at least two windows".into()));
    }
    if opts.steps == 0 {
        return Err(Error::Parameter("LRNF needs at least one step".into()));
    }
    let init = init_frequencies_topk(windows, k_max)?;
    let basis = build_cdct_matrix(&init, n)?;
    let mut recovery = vec![0.0; n * k_max];
    for k in 0..k_max {
        for j in 0..n {
            recovery[j * k_max + k] = basis.matrix().data()[k * n + j];
        }
    }
    let mut params = ParamStore::new();
    let psi_id = params.add("psi", init.as_tensor());
    let rec_id = params.add("recovery", Tensor::new(&[n, k_max], recovery)?);
    let initial_nmse = lrnf_nmse(windows, init.psi(), params.get(rec_id))?;

    let mut adam = AdamState::with_lr(opts.lr);
    let mut batch_buf = Vec::new();
    for step in 0..opts.steps {
        let mut tape = Tape::new();
        let z = match opts.batch {
            Some(b) if b < count => {
                batch_buf.clear();
                for i in sample(rng, count, b).into_iter() {
                    batch_buf.extend_from_slice(&windows.data()[i * n..(i + 1) * n]);
                }
                tape.constant_owned(Tensor::new(&[b, n], batch_buf.clone())?)
            }
            _ => tape.constant(windows),
        };
        let psi = tape.param(&params, psi_id);
        let rec_w = tape.param(&params, rec_id);
        let coeffs = cdct_on_tape(&mut tape, psi, z)?;
        let rec = tape.matmul_t(coeffs, rec_w)?;
        let loss = tape.mse(rec, z)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence(alloc::format!(
                "LRNF loss became {value} at step {step} (lr = {})",
                opts.lr
            )));
        }
        tape.backward(loss, &mut params)?;
        adam.step(&mut params)?;
        constrain_frequencies(params.get_mut(psi_id).data_mut());
    }
    let psi = params.get(psi_id).data().to_vec();
    let recovery = params.get(rec_id).clone().with_requires_grad(false);
    let nmse = lrnf_nmse(windows, &psi, &recovery)?;
    Ok(LrnfFit {
        frequencies: FrequencySet::new(psi, true)?,
        recovery,
        report: ReconstructionReport::single(Method::Lrnf, k_max, nmse),
        initial_nmse,
    })
}
