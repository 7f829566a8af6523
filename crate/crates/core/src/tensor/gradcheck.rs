//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Tensors with more coordinates than this are checked on a random subset.
    pub max_coords: usize,
    /// Denominator floor for the relative error, so that gradients which are
    /// zero up to rounding are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { step: 1e-5, tol: 1e-4, max_coords: 500, abs_floor: 1e-6, seed: 0 }
    }
}

/// Outcome for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub failures: Vec<Failure>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Parameter tensor holding the largest relative error.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` records a scalar loss on the given tape from the current parameter
/// values; it must be deterministic (disable dropout). Gradient slots are
/// cleared on return.
pub fn finite_diff_gradcheck<F>(mut f: F, params: &mut ParamStore, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::Parameter(alloc::format!("finite-difference step must be > 0, got {}", opts.step)));
    }

    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::InvalidCheck(alloc::format!("loss is not finite ({base})")));
    }
    tape.backward(loss, params)?;
    drop(tape);
    if eval(&mut f, params)?.to_bits() != base.to_bits() {
        return Err(Error::InvalidCheck("loss differs between identical evaluations".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport { params: Vec::new(), failures: Vec::new(), max_rel_err: 0.0, tol: opts.tol };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic = params.get(id).grad().map(<[f64]>::to_vec).unwrap_or_default();
        let n = params.get(id).numel();
        let coords: Vec<usize> = if n > opts.max_coords {
            let mut picked = sample(&mut rng, n, opts.max_coords).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..n).collect()
        };
        let name = String::from(params.name(id));
        let mut check = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&mut f, params);
            params.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&mut f, params);
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = analytic.get(i).copied().unwrap_or(0.0);
            let rel = relative_error(a, numeric, opts.abs_floor);
            if rel > check.max_rel_err || check.checked == 0 {
                check.max_rel_err = rel;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            if rel.is_nan() || rel >= opts.tol {
                report.failures.push(Failure { name: name.clone(), index: i, analytic: a, numeric, rel_err: rel });
            }
        }
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.params.push(check);
    }
    params.zero_grads();
    Ok(report)
}

fn eval<F>(f: &mut F, params: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::InvalidCheck(alloc::format!("loss is not finite ({v})")));
    }
    Ok(v)
}
