use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

use super::poly::PolyLoss;
use super::symmetric::{decode_index, SymTensor};
use crate::error::{check_dim, Result, StabError};

/// Largest dimension for which order-4 tensors are materialised densely.
pub const MAX_DENSE_DIM: usize = 8;

/// Gradient, Hessian and symmetric third/fourth derivative tensors at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeTensors {
    pub point: Vec<f64>,
    pub grad: Vec<f64>,
    pub hess: DMatrix<f64>,
    pub d3: SymTensor,
    pub d4: SymTensor,
    /// Whether the values are analytic (polynomial path) or finite-difference
    /// estimates.
    pub exact: bool,
}

impl DerivativeTensors {
    pub fn dim(&self) -> usize {
        self.point.len()
    }
}

/// Exact derivatives of a polynomial loss up to order four.
pub fn poly_derivative_tensors(loss: &PolyLoss, point: &[f64]) -> Result<DerivativeTensors> {
    check_dim(loss.dim(), point.len())?;
    let d = loss.dim();
    if d > MAX_DENSE_DIM {
        return Err(StabError::InvalidArgument(format!(
            "dense order-4 tensors are limited to d <= {MAX_DENSE_DIM}, got {d}"
        )));
    }
    let h = loss.derivative_tensor(point, 2)?;
    Ok(DerivativeTensors {
        point: point.to_vec(),
        grad: loss.gradient(point),
        hess: DMatrix::from_row_slice(d, d, h.data()),
        d3: loss.derivative_tensor(point, 3)?,
        d4: loss.derivative_tensor(point, 4)?,
        exact: true,
    })
}

/// Central-difference step for an order-`k` derivative.
pub fn fd_step(order: usize) -> f64 {
    1e-16_f64.powf(1.0 / (order as f64 + 2.0))
}

/// Finite-difference derivative tensors of a black-box scalar function.
///
/// Orders above `order` are returned as zero tensors. Every tensor is
/// symmetrised by averaging over index permutations.
pub fn fd_derivative_tensors<F>(f: F, point: &[f64], order: usize) -> Result<DerivativeTensors>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1..=4).contains(&order) {
        return Err(StabError::InvalidArgument(format!(
            "finite-difference order must be in 1..=4, got {order}"
        )));
    }
    let d = point.len();
    if d == 0 || d > MAX_DENSE_DIM {
        return Err(StabError::InvalidArgument(format!(
            "finite differences need 1 <= d <= {MAX_DENSE_DIM}, got {d}"
        )));
    }
    let mut tensors = Vec::with_capacity(4);
    for k in 1..=4 {
        if k <= order {
            tensors.push(fd_tensor(&f, point, k)?);
        } else {
            tensors.push(SymTensor::zeros(k, d)?);
        }
    }
    let d4 = tensors.pop().unwrap();
    let d3 = tensors.pop().unwrap();
    let h = tensors.pop().unwrap();
    let g = tensors.pop().unwrap();
    Ok(DerivativeTensors {
        point: point.to_vec(),
        grad: g.data().to_vec(),
        hess: DMatrix::from_row_slice(d, d, h.data()),
        d3,
        d4,
        exact: false,
    })
}

/// Order-`k` tensor from the `2^k`-point central stencil, one evaluation set
/// per symmetry class.
pub(crate) fn fd_tensor<F>(f: &F, point: &[f64], k: usize) -> Result<SymTensor>
where
    F: Fn(&[f64]) -> f64,
{
    let d = point.len();
    let h = fd_step(k);
    let denom = (2.0 * h).powi(k as i32);
    let mut shifted = point.to_vec();
    let mut failure: Option<StabError> = None;
    let tensor = SymTensor::from_sorted_fn(k, d, |idx| {
        let mut acc = 0.0;
        for signs in 0..(1usize << k) {
            shifted.copy_from_slice(point);
            let mut parity = 1.0;
            for (bit, &axis) in idx.iter().enumerate() {
                if signs & (1 << bit) != 0 {
                    shifted[axis] -= h;
                    parity = -parity;
                } else {
                    shifted[axis] += h;
                }
            }
            let v = f(&shifted);
            if !v.is_finite() && failure.is_none() {
                failure = Some(StabError::NonFinite(format!(
                    "function value on stencil at {shifted:?}"
                )));
            }
            acc += parity * v;
        }
        acc / denom
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(tensor),
    }
}

/// A scalar loss that can be simulated and differentiated.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn derivative_tensors(&self, x: &[f64]) -> Result<DerivativeTensors>;
    /// Symmetric derivative tensor of arbitrary order.
    fn derivative_tensor(&self, x: &[f64], order: usize) -> Result<SymTensor>;
    /// Highest order with a non-zero derivative, when known exactly.
    fn exact_degree(&self) -> Option<usize>;
    /// Polynomial representation, if this objective has one.
    fn as_poly(&self) -> Option<&PolyLoss> {
        None
    }
}

impl Objective for PolyLoss {
    fn dim(&self) -> usize {
        PolyLoss::dim(self)
    }

    fn value(&self, x: &[f64]) -> f64 {
        PolyLoss::value(self, x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        PolyLoss::gradient(self, x)
    }

    fn derivative_tensors(&self, x: &[f64]) -> Result<DerivativeTensors> {
        poly_derivative_tensors(self, x)
    }

    fn derivative_tensor(&self, x: &[f64], order: usize) -> Result<SymTensor> {
        PolyLoss::derivative_tensor(self, x, order)
    }

    fn exact_degree(&self) -> Option<usize> {
        Some(self.degree() as usize)
    }

    fn as_poly(&self) -> Option<&PolyLoss> {
        Some(self)
    }
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Black-box objective differentiated by central finite differences.
#[derive(Clone)]
pub struct FnObjective {
    dim: usize,
    f: Arc<ScalarFn>,
}

impl FnObjective {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { dim, f: Arc::new(f) }
    }
}

impl fmt::Debug for FnObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnObjective").field("dim", &self.dim).finish()
    }
}

impl Objective for FnObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let h = fd_step(1);
        let mut y = x.to_vec();
        (0..self.dim)
            .map(|i| {
                y[i] = x[i] + h;
                let up = (self.f)(&y);
                y[i] = x[i] - h;
                let down = (self.f)(&y);
                y[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn derivative_tensors(&self, x: &[f64]) -> Result<DerivativeTensors> {
        check_dim(self.dim, x.len())?;
        fd_derivative_tensors(|p: &[f64]| (self.f)(p), x, 4)
    }

    fn derivative_tensor(&self, x: &[f64], order: usize) -> Result<SymTensor> {
        check_dim(self.dim, x.len())?;
        if !(1..=4).contains(&order) {
            return Err(StabError::InvalidArgument(format!(
                "finite-difference objectives support orders 1..=4, got {order}"
            )));
        }
        fd_tensor(&|p: &[f64]| (self.f)(p), x, order)
    }

    fn exact_degree(&self) -> Option<usize> {
        None
    }
}

/// Index tuples of a dense order-`order` tensor, in storage order.
pub fn tensor_indices(order: usize, dim: usize) -> impl Iterator<Item = Vec<usize>> {
    let len = dim.pow(order as u32);
    (0..len).map(move |flat| {
        let mut idx = vec![0; order];
        decode_index(flat, dim, &mut idx);
        idx
    })
}
