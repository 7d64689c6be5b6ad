use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::symmetric::SymTensor;
use crate::error::{check_dim, Result, StabError};

/// Multivariate polynomial loss `sum_a c_a x^a` with exact derivatives.
///
/// Terms are keyed by their exponent multi-index; zero coefficients are never
/// stored and every term respects the configured degree cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyLoss {
    dim: usize,
    max_degree: u32,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl PolyLoss {
    pub const DEFAULT_MAX_DEGREE: u32 = 6;

    pub fn zero(dim: usize) -> Self {
        Self::zero_with_max_degree(dim, Self::DEFAULT_MAX_DEGREE)
    }

    pub fn zero_with_max_degree(dim: usize, max_degree: u32) -> Self {
        Self {
            dim,
            max_degree,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_terms<I>(dim: usize, terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<u32>, f64)>,
    {
        let mut p = Self::zero(dim);
        for (exps, c) in terms {
            p.add_term(exps, c)?;
        }
        Ok(p)
    }

    /// Adds `coeff * x^exps`, merging with an existing term of the same
    /// exponent.
    pub fn add_term(&mut self, exps: Vec<u32>, coeff: f64) -> Result<()> {
        check_dim(self.dim, exps.len())?;
        if !coeff.is_finite() {
            return Err(StabError::NonFinite(format!("coefficient of {exps:?}")));
        }
        let degree: u32 = exps.iter().sum();
        if degree > self.max_degree {
            return Err(StabError::InvalidArgument(format!(
                "term {exps:?} has degree {degree} > cap {}",
                self.max_degree
            )));
        }
        let merged = self.terms.get(&exps).copied().unwrap_or(0.0) + coeff;
        if merged == 0.0 {
            self.terms.remove(&exps);
        } else {
            self.terms.insert(exps, merged);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn terms(&self) -> &BTreeMap<Vec<u32>, f64> {
        &self.terms
    }

    /// Total degree of the polynomial (0 for the zero polynomial).
    pub fn degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|e| e.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * monomial(e, x))
            .sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        let mut counts = vec![0u32; self.dim];
        for (i, gi) in g.iter_mut().enumerate() {
            counts[i] = 1;
            *gi = self.partial(&counts, x);
            counts[i] = 0;
        }
        g
    }

    /// Mixed partial derivative: `counts[i]` differentiations in variable `i`.
    pub fn partial(&self, counts: &[u32], x: &[f64]) -> f64 {
        let mut total = 0.0;
        'terms: for (exps, c) in &self.terms {
            let mut v = *c;
            for ((&e, &a), &xi) in exps.iter().zip(counts).zip(x) {
                if a > e {
                    continue 'terms;
                }
                v *= falling_factorial(e, a) * xi.powi((e - a) as i32);
            }
            total += v;
        }
        total
    }

    /// Exact order-`order` derivative tensor at `x`.
    pub fn derivative_tensor(&self, x: &[f64], order: usize) -> Result<SymTensor> {
        check_dim(self.dim, x.len())?;
        let mut counts = vec![0u32; self.dim];
        SymTensor::from_sorted_fn(order, self.dim, |idx| {
            counts.iter_mut().for_each(|c| *c = 0);
            for &i in idx {
                counts[i] += 1;
            }
            self.partial(&counts, x)
        })
    }

    /// Returns `self * s`.
    pub fn scaled(&self, s: f64) -> PolyLoss {
        let mut out = Self::zero_with_max_degree(self.dim, self.max_degree);
        if s != 0.0 {
            for (e, c) in &self.terms {
                out.terms.insert(e.clone(), c * s);
            }
        }
        out
    }

    /// Returns `self + other`.
    pub fn sum(&self, other: &PolyLoss) -> Result<PolyLoss> {
        check_dim(self.dim, other.dim)?;
        let mut out = self.clone();
        out.max_degree = self.max_degree.max(other.max_degree);
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c)?;
        }
        Ok(out)
    }

    /// Arithmetic mean of a non-empty set of polynomials of equal dimension.
    pub fn mean<'a, I>(losses: I) -> Result<PolyLoss>
    where
        I: IntoIterator<Item = &'a PolyLoss>,
    {
        let mut iter = losses.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| StabError::InvalidArgument("mean of no losses".into()))?;
        let mut acc = first.clone();
        let mut n = 1usize;
        for p in iter {
            acc = acc.sum(p)?;
            n += 1;
        }
        Ok(acc.scaled(1.0 / n as f64))
    }

    /// `f+(x) = x^2/2 + x^4/4`.
    pub fn f_plus() -> PolyLoss {
        Self::from_terms(1, [(vec![2], 0.5), (vec![4], 0.25)]).expect("valid preset")
    }

    /// `f-(x) = x^2/2 - x^4/4`.
    pub fn f_minus() -> PolyLoss {
        Self::from_terms(1, [(vec![2], 0.5), (vec![4], -0.25)]).expect("valid preset")
    }

    /// `f_a(x) = a x^2 / 2`.
    pub fn f_a(a: f64) -> PolyLoss {
        Self::from_terms(1, [(vec![2], 0.5 * a)]).expect("valid preset")
    }

    /// `L_beta(x1, x2) = x1^2/2 + x2^2/10 + beta x1^2 x2 + x1^4/10`.
    pub fn l_beta(beta: f64) -> PolyLoss {
        Self::from_terms(
            2,
            [
                (vec![2, 0], 0.5),
                (vec![0, 2], 0.1),
                (vec![2, 1], beta),
                (vec![4, 0], 0.1),
            ],
        )
        .expect("valid preset")
    }

    /// Taylor polynomial `sum_k T_k[x]^k / k!` around the origin.
    pub fn from_taylor(dim: usize, tensors: &[SymTensor]) -> Result<PolyLoss> {
        let mut p = Self::zero(dim);
        for t in tensors {
            check_dim(dim, t.dim())?;
            let k = t.order();
            let fact: f64 = (1..=k).map(|v| v as f64).product();
            let mut idx = vec![0usize; k];
            for (flat, &value) in t.data().iter().enumerate() {
                if value == 0.0 {
                    continue;
                }
                super::symmetric::decode_index(flat, dim, &mut idx);
                let mut exps = vec![0u32; dim];
                idx.iter().for_each(|&i| exps[i] += 1);
                p.add_term(exps, value / fact)?;
            }
        }
        Ok(p)
    }

    /// Pure quadratic `sum_i h_i x_i^2 / 2`.
    pub fn diagonal_quadratic(h: &[f64]) -> PolyLoss {
        let d = h.len();
        let terms = h.iter().enumerate().map(|(i, hi)| {
            let mut e = vec![0u32; d];
            e[i] = 2;
            (e, 0.5 * hi)
        });
        Self::from_terms(d, terms).expect("valid preset")
    }
}

fn monomial(exps: &[u32], x: &[f64]) -> f64 {
    exps.iter()
        .zip(x)
        .map(|(&e, &xi)| xi.powi(e as i32))
        .product()
}

fn falling_factorial(n: u32, k: u32) -> f64 {
    (n - k + 1..=n).map(|v| v as f64).product()
}
