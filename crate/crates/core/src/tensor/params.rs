use super::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in the canonical order fixed at model construction.
///
/// Holds global models, client models, gradients and pseudo-gradients alike.
/// Arithmetic between two vectors is only defined when names, order and
/// shapes agree exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    /// Same names, order and shapes, with every value set to zero.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let data = t.data().iter().map(|&v| f(v)).collect();
                (n.clone(), Tensor::new(data, t.shape().to_vec()).expect("shape preserved"))
            })
            .collect();
        Self { entries }
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "parameter vectors with {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Contract(format!(
                    "entry `{na}` {:?} does not match `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Element-wise combination of two compatible vectors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_compatible(other)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((n, a), (_, b))| {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                (n.clone(), Tensor::new(data, a.shape().to_vec()).expect("shape preserved"))
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// Uniform mean, summed in slice order then divided once.
    ///
    /// A single-element slice returns a bytewise copy of that element.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ParamVector>) -> Result<Self> {
        let mut iter = items.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| Error::Contract("mean of zero parameter vectors".into()))?;
        let mut acc = first.clone();
        let mut count = 1usize;
        for item in iter {
            acc.check_compatible(item)?;
            for ((_, a), (_, b)) in acc.entries.iter_mut().zip(&item.entries) {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            count += 1;
        }
        if count > 1 {
            let inv = count as f64;
            for (_, t) in acc.entries.iter_mut() {
                for x in t.data_mut() {
                    *x /= inv;
                }
            }
        }
        Ok(acc)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                acc += x * y;
            }
        }
        Ok(acc)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).expect("self-compatible").sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let mut worst: f64 = 0.0;
        for ((_, a), (_, b)) in self.entries.iter().zip(&other.entries) {
            for (x, y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs());
            }
        }
        Ok(worst)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Flattened values in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn flat_get(&self, index: usize) -> Option<f64> {
        let mut offset = index;
        for (_, t) in &self.entries {
            if offset < t.len() {
                return Some(t.data()[offset]);
            }
            offset -= t.len();
        }
        None
    }

    pub fn flat_set(&mut self, index: usize, value: f64) -> Result<()> {
        let mut offset = index;
        for (_, t) in &mut self.entries {
            if offset < t.len() {
                t.data_mut()[offset] = value;
                return Ok(());
            }
            offset -= t.len();
        }
        Err(Error::Index(format!(
            "flat index {index} beyond {} parameters",
            self.total_len()
        )))
    }

    /// Little-endian bytes of every value in canonical order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_len() * 8);
        for (_, t) in &self.entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.check_compatible(other).is_ok() && self.to_le_bytes() == other.to_le_bytes()
    }
}
