use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{check_dim, Result, StabError};

/// Dense tensor of a given order over `R^dim`, stored row-major with the
/// first index most significant (mixed-radix layout, radix `dim`).
///
/// Instances produced by this crate are fully symmetric: the stored value is
/// invariant under every permutation of the indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymTensor {
    order: usize,
    dim: usize,
    data: Vec<f64>,
}

/// Cap on the number of dense tensor entries.
pub const TENSOR_ENTRY_CAP: u128 = 1_000_000;

pub(crate) fn checked_power(dim: usize, order: usize, cap: u128) -> Result<usize> {
    let mut n: u128 = 1;
    for _ in 0..order {
        n = n.saturating_mul(dim as u128);
        if n > cap {
            return Err(StabError::SizeCap { requested: n, cap });
        }
    }
    Ok(n as usize)
}

impl SymTensor {
    pub fn zeros(order: usize, dim: usize) -> Result<Self> {
        let len = checked_power(dim, order, TENSOR_ENTRY_CAP)?;
        Ok(Self {
            order,
            dim,
            data: vec![0.0; len],
        })
    }

    /// Builds a tensor from raw data, averaging every entry over the orbit of
    /// its index tuple so the result is exactly symmetric.
    pub fn symmetrized(order: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let len = checked_power(dim, order, TENSOR_ENTRY_CAP)?;
        check_dim(len, data.len())?;
        let mut classes: HashMap<Vec<usize>, (f64, usize)> = HashMap::new();
        let mut idx = vec![0usize; order];
        for (flat, &value) in data.iter().enumerate() {
            decode_index(flat, dim, &mut idx);
            let mut key = idx.clone();
            key.sort_unstable();
            let slot = classes.entry(key).or_insert((0.0, 0));
            slot.0 += value;
            slot.1 += 1;
        }
        let mut out = vec![0.0; len];
        for (flat, entry) in out.iter_mut().enumerate() {
            decode_index(flat, dim, &mut idx);
            idx.sort_unstable();
            let (sum, count) = classes[&idx];
            *entry = sum / count as f64;
        }
        Ok(Self {
            order,
            dim,
            data: out,
        })
    }

    /// Fills every entry from a function of the sorted index tuple. The
    /// function is evaluated once per symmetry class.
    pub fn from_sorted_fn<F>(order: usize, dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(&[usize]) -> f64,
    {
        let len = checked_power(dim, order, TENSOR_ENTRY_CAP)?;
        let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
        let mut idx = vec![0usize; order];
        let mut data = Vec::with_capacity(len);
        for flat in 0..len {
            decode_index(flat, dim, &mut idx);
            idx.sort_unstable();
            let value = match cache.get(&idx) {
                Some(v) => *v,
                None => {
                    let v = f(&idx);
                    cache.insert(idx.clone(), v);
                    v
                }
            };
            data.push(value);
        }
        Ok(Self { order, dim, data })
    }

    /// Wraps data that is already symmetric (e.g. a linear combination of
    /// symmetric tensors).
    pub(crate) fn from_symmetric_data(order: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let len = checked_power(dim, order, TENSOR_ENTRY_CAP)?;
        check_dim(len, data.len())?;
        Ok(Self { order, dim, data })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.order);
        let flat = index.iter().fold(0usize, |acc, &i| acc * self.dim + i);
        self.data[flat]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    /// Contracts `times` slots with `v`, returning a tensor of order
    /// `order - times`.
    pub fn contract(&self, v: &[f64], times: usize) -> Result<SymTensor> {
        check_dim(self.dim, v.len())?;
        if times > self.order {
            return Err(StabError::InvalidArgument(format!(
                "cannot contract {times} slots of an order-{} tensor",
                self.order
            )));
        }
        let mut current = self.data.clone();
        let mut order = self.order;
        for _ in 0..times {
            let stride = current.len() / self.dim;
            let mut next = vec![0.0; stride];
            for (i, vi) in v.iter().enumerate() {
                if *vi == 0.0 {
                    continue;
                }
                let block = &current[i * stride..(i + 1) * stride];
                for (n, b) in next.iter_mut().zip(block) {
                    *n += vi * b;
                }
            }
            current = next;
            order -= 1;
        }
        Ok(SymTensor {
            order,
            dim: self.dim,
            data: current,
        })
    }

    /// `T[v]^order`, the full contraction with a single vector.
    pub fn eval_power(&self, v: &[f64]) -> Result<f64> {
        Ok(self.contract(v, self.order)?.data[0])
    }

    /// Contraction `T[v]^(order-1)`, a vector in `R^dim`.
    pub fn eval_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.order == 0 {
            return Err(StabError::InvalidArgument(
                "order-0 tensor has no free slot".into(),
            ));
        }
        Ok(self.contract(v, self.order - 1)?.data)
    }

    /// Largest deviation between any entry and its index-permuted copies.
    pub fn asymmetry(&self) -> f64 {
        let mut classes: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        let mut idx = vec![0usize; self.order];
        for (flat, &value) in self.data.iter().enumerate() {
            decode_index(flat, self.dim, &mut idx);
            idx.sort_unstable();
            let e = classes
                .entry(idx.clone())
                .or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(value);
            e.1 = e.1.max(value);
        }
        classes.values().fold(0.0, |m, (lo, hi)| m.max(hi - lo))
    }
}

/// Decodes a flat row-major index into its mixed-radix digits.
pub(crate) fn decode_index(mut flat: usize, dim: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = flat % dim;
        flat /= dim;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrize_averages_orbits() {
        // order 2, dim 2: [[1, 2], [4, 5]] -> off-diagonal averaged to 3
        let t = SymTensor::symmetrized(2, 2, vec![1.0, 2.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.data(), &[1.0, 3.0, 3.0, 5.0]);
        assert_eq!(t.asymmetry(), 0.0);
    }

    #[test]
    fn contraction_matches_manual_sum() {
        let t = SymTensor::from_sorted_fn(3, 2, |idx| (idx.iter().sum::<usize>() + 1) as f64)
            .unwrap();
        let v = [0.5, -2.0];
        let mut manual = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    manual += t.get(&[i, j, k]) * v[i] * v[j] * v[k];
                }
            }
        }
        assert!((t.eval_power(&v).unwrap() - manual).abs() < 1e-12);
    }

    #[test]
    fn size_cap_is_enforced() {
        assert!(matches!(
            SymTensor::zeros(7, 10),
            Err(StabError::SizeCap { .. })
        ));
    }
}
