//! Dense tensors, the autodiff tape, and the optimizer.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod params;
pub(crate) mod tape;

pub use gradcheck::{finite_diff_gradcheck, GradcheckOptions, GradcheckReport, ParamCheck};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};

/// Dense row-major array of `f64` with an optional gradient slot.
///
/// A shape of `[]` denotes a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err!("zero-sized dimension in shape {:?}", shape));
        }
        if numel(shape) != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel(shape)], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)], grad: None, requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], grad: None, requires_grad: false }
    }

    /// Builds a 2-D tensor from nested rows (all rows must have equal length).
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        Tensor::new(&[rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot, creating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(dim_err!("gradient length {} != {}", delta.len(), self.data.len()));
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// True when every value is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(alloc::string::String::from("tensor holds NaN or Inf")))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, d) in index.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.data[flat]
    }
}

/// Standard matrix product of two 2-D tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(dim_err!("matmul expects 2-D operands, got {:?} and {:?}", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions {} and {} differ", k, k2));
    }
    let mut out = vec![0.0; m * n];
    kernels::mm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// Mean squared error between equally shaped tensors.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.numel() as f64)
}

/// Mean absolute error between equally shaped tensors.
pub fn mae_metric(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| libm::fabs(p - t)).sum();
    Ok(sum / pred.numel() as f64)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn matmul_small_cases() {
        let eye = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[&[2.0], &[3.0]]).unwrap();
        assert_eq!(matmul(&eye, &col).unwrap().data(), &[2.0, 3.0]);
        let row = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
        assert!(matches!(matmul(&row, &row), Err(Error::Dimension(_))));
    }

    #[test]
    fn losses() {
        let t = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).unwrap();
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(mse_loss(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap(), 1.0);
        assert_eq!(mse_loss(&t(&[1.0, 2.0]), &t(&[0.0, 0.0])).unwrap(), 2.5);
        assert_eq!(mae_metric(&t(&[1.0, -1.0]), &t(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(mse_loss(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
        assert!(mae_metric(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn finite_check() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.is_finite());
        t.data_mut()[1] = f64::NAN;
        assert!(!t.is_finite());
        assert!(t.check_finite().is_err());
    }
}
