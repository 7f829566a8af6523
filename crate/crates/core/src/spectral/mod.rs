//! Cosine transforms.
//!
//! [`DctBasis`] is the orthonormal DCT-II matrix. The customized transform
//! ([`CdctMatrix`]) keeps the same cosine rows but evaluates them at arbitrary
//! frequencies `psi_k ∈ (0, 1)`; row 0 stays the constant `1/√N` so the mean
//! is always retained. With `psi_k = k/N` the two coincide.

mod recon;

pub use recon::{
    fit_lrnf, normalized_mse, reconstruct_rndf, reconstruct_topf, windows_from_columns, LrnfFit, LrnfOptions,
    Method, ReconstructionReport,
};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::tensor::kernels;
use crate::tensor::tape::cdct_entry;
use crate::tensor::{Tape, Tensor, Var};

/// Lower and upper clamp applied to learnable frequencies.
pub const PSI_MARGIN: f64 = 1e-3;
/// Learned frequencies closer than this are considered duplicates.
pub const DUPLICATE_TOL: f64 = 1e-9;
/// Distance a duplicate frequency is pushed away from its neighbour.
pub const DUPLICATE_NUDGE: f64 = 1e-6;

/// Orthonormal DCT-II matrix of size `N × N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    n: usize,
    matrix: Tensor,
}

impl DctBasis {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(dim_err!("DCT size must be positive"));
        }
        // cos(π(j+½)k/N) = cos(π·m/2N) with m = (2j+1)k mod 4N
        let period = 4 * n;
        let table: Vec<f64> = (0..period).map(|m| libm::cos(core::f64::consts::PI * m as f64 / (2 * n) as f64)).collect();
        let (dc, ac) = (libm::sqrt(1.0 / n as f64), libm::sqrt(2.0 / n as f64));
        let mut data = Vec::with_capacity(n * n);
        for k in 0..n {
            let scale = if k == 0 { dc } else { ac };
            for j in 0..n {
                data.push(scale * table[((2 * j + 1) * k) % period]);
            }
        }
        Ok(DctBasis { n, matrix: Tensor::new(&[n, n], data)? })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// Forward transform of every row of a row-major `rows × N` buffer.
    pub fn forward_rows(&self, rows: &[f64]) -> Vec<f64> {
        debug_assert_eq!(rows.len() % self.n, 0);
        let count = rows.len() / self.n;
        let mut out = vec![0.0; rows.len()];
        kernels::mm_nt(rows, self.matrix.data(), &mut out, count, self.n, self.n);
        out
    }

    /// Inverse transform of every row of a row-major `rows × N` buffer.
    pub fn inverse_rows(&self, rows: &[f64]) -> Vec<f64> {
        debug_assert_eq!(rows.len() % self.n, 0);
        let count = rows.len() / self.n;
        let mut out = vec![0.0; rows.len()];
        kernels::mm(rows, self.matrix.data(), &mut out, count, self.n, self.n);
        out
    }
}

/// `T̃·z` for a single vector.
pub fn dct(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(dim_err!("dct of an empty vector"));
    }
    Ok(DctBasis::new(z.len())?.forward_rows(z))
}

/// `T̃ᵀ·z̃` for a single vector.
pub fn idct(coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.is_empty() {
        return Err(dim_err!("idct of an empty vector"));
    }
    Ok(DctBasis::new(coeffs.len())?.inverse_rows(coeffs))
}

/// Frequency coefficients of the customized transform, `psi[0] == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencySet {
    psi: Vec<f64>,
    learnable: bool,
}

impl FrequencySet {
    /// Validates `psi[0] == 0` and `psi[k] ∈ (0, 1)` for `k ≥ 1`.
    pub fn new(psi: Vec<f64>, learnable: bool) -> Result<Self> {
        validate_psi(&psi)?;
        Ok(FrequencySet { psi, learnable })
    }

    /// Grid frequencies `{0, 1/n, …, (k_max-1)/n}`.
    pub fn grid(k_max: usize, n: usize) -> Result<Self> {
        if k_max == 0 || k_max > n {
            return Err(Error::Parameter(alloc::format!("grid needs 1 <= k_max <= n, got k_max={k_max}, n={n}")));
        }
        Self::new((0..k_max).map(|k| k as f64 / n as f64).collect(), true)
    }

    pub fn k_max(&self) -> usize {
        self.psi.len()
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(&[self.psi.len()], self.psi.clone()).expect("psi is non-empty")
    }

    /// Applies [`constrain_frequencies`] in place.
    pub fn constrain(&mut self) {
        constrain_frequencies(&mut self.psi);
    }
}

fn validate_psi(psi: &[f64]) -> Result<()> {
    match psi.first() {
        None => return Err(Error::Parameter("frequency set must hold at least the DC term".into())),
        Some(&p0) if p0 != 0.0 => return Err(Error::Parameter(alloc::format!("psi[0] must be 0, got {p0}"))),
        _ => {}
    }
    if let Some((k, p)) = psi.iter().enumerate().skip(1).find(|(_, p)| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Parameter(alloc::format!("psi[{k}] = {p} is outside (0, 1)")));
    }
    Ok(())
}

/// Pins `psi[0]` to zero, clamps the rest into `[1e-3, 1 - 1e-3]` and pushes
/// apart coefficients that collapsed onto each other.
pub fn constrain_frequencies(psi: &mut [f64]) {
    let Some(first) = psi.first_mut() else { return };
    *first = 0.0;
    for p in psi.iter_mut().skip(1) {
        *p = if p.is_nan() { 0.5 } else { p.clamp(PSI_MARGIN, 1.0 - PSI_MARGIN) };
    }
    if psi.len() < 3 {
        return;
    }
    let mut order: Vec<usize> = (1..psi.len()).collect();
    order.sort_by(|&a, &b| psi[a].total_cmp(&psi[b]).then(a.cmp(&b)));
    // upward sweep separates duplicates, downward sweep repairs the top bound
    for w in 1..order.len() {
        let (lo, hi) = (order[w - 1], order[w]);
        if psi[hi] - psi[lo] < DUPLICATE_TOL {
            psi[hi] = psi[lo] + DUPLICATE_NUDGE;
        }
    }
    let upper = 1.0 - PSI_MARGIN;
    let top = order[order.len() - 1];
    psi[top] = psi[top].min(upper);
    for w in (1..order.len()).rev() {
        let (lo, hi) = (order[w - 1], order[w]);
        if psi[hi] - psi[lo] < DUPLICATE_TOL {
            psi[lo] = psi[hi] - DUPLICATE_NUDGE;
        }
    }
}

/// Customized cosine basis `T̂ ∈ R^{k_max × N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdctMatrix {
    freqs: FrequencySet,
    matrix: Tensor,
}

impl CdctMatrix {
    pub fn k_max(&self) -> usize {
        self.freqs.k_max()
    }

    pub fn len(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frequencies(&self) -> &FrequencySet {
        &self.freqs
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    /// More rows than samples: the basis cannot be full row rank.
    pub fn is_overcomplete(&self) -> bool {
        self.k_max() > self.len()
    }
}

/// Builds `T̂` for sequences of length `n`.
pub fn build_cdct_matrix(freqs: &FrequencySet, n: usize) -> Result<CdctMatrix> {
    validate_psi(freqs.psi())?;
    if n == 0 {
        return Err(dim_err!("CDCT length must be positive"));
    }
    let mut data = Vec::with_capacity(freqs.k_max() * n);
    for (k, &p) in freqs.psi().iter().enumerate() {
        for j in 0..n {
            data.push(cdct_entry(k, j, p, n).0);
        }
    }
    Ok(CdctMatrix { freqs: freqs.clone(), matrix: Tensor::new(&[freqs.k_max(), n], data)? })
}

/// Contracts the trailing axis of `z` with `T̂ᵀ`: `[…, N] → […, k_max]`.
pub fn cdct_apply(matrix: &CdctMatrix, z: &Tensor) -> Result<Tensor> {
    let n = matrix.len();
    if z.shape().last() != Some(&n) {
        return Err(dim_err!("CDCT of length {n} applied to shape {:?}", z.shape()));
    }
    let rows = z.numel() / n;
    let k = matrix.k_max();
    let mut out = vec![0.0; rows * k];
    kernels::mm_nt(z.data(), matrix.matrix().data(), &mut out, rows, n, k);
    let mut shape = z.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = k;
    Tensor::new(&shape, out)
}

/// Differentiable version of [`cdct_apply`]: gradients reach both `z` and
/// the frequency vector `psi`.
pub fn cdct_on_tape(tape: &mut Tape, psi: Var, z: Var) -> Result<Var> {
    let n = *tape.shape(z).last().ok_or_else(|| dim_err!("CDCT of a scalar"))?;
    let basis = tape.cdct_basis(psi, n)?;
    tape.matmul_t(z, basis)
}

/// Mean absolute DCT coefficient per grid frequency over all windows.
pub(crate) fn mean_abs_spectrum(windows: &Tensor) -> Result<Vec<f64>> {
    let &[count, n] = windows.shape() else {
        return Err(dim_err!("expected a W×N window matrix, got {:?}", windows.shape()));
    };
    let coeffs = DctBasis::new(n)?.forward_rows(windows.data());
    let mut score = vec![0.0; n];
    for row in coeffs.chunks_exact(n) {
        score.iter_mut().zip(row).for_each(|(s, c)| *s += libm::fabs(*c));
    }
    score.iter_mut().for_each(|s| *s /= count as f64);
    Ok(score)
}

/// Indices of the `count` largest non-DC grid frequencies, ascending.
///
/// Scores within rounding of zero count as exact ties; ties go to the lower
/// index.
pub(crate) fn top_grid_indices(score: &[f64], count: usize) -> Vec<usize> {
    let scale = score.iter().copied().fold(0.0, f64::max);
    let snap = |s: f64| if s <= 1e-12 * scale { 0.0 } else { s };
    let mut idx: Vec<usize> = (1..score.len()).collect();
    idx.sort_by(|&a, &b| snap(score[b]).total_cmp(&snap(score[a])).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Initial frequencies: DC plus the `k_max - 1` grid frequencies with the
/// largest mean absolute DCT coefficient over `windows` (`W × N`).
pub fn init_frequencies_topk(windows: &Tensor, k_max: usize) -> Result<FrequencySet> {
    let n = *windows.shape().last().ok_or_else(|| dim_err!("empty window matrix"))?;
    if k_max == 0 || k_max > n {
        return Err(Error::Parameter(alloc::format!("k_max = {k_max} must lie in 1..={n}")));
    }
    let score = mean_abs_spectrum(windows)?;
    let mut psi = vec![0.0];
    psi.extend(top_grid_indices(&score, k_max - 1).into_iter().map(|k| k as f64 / n as f64));
    FrequencySet::new(psi, true)
}
