//! Named weight arrays shared by every network in the framework.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Structure(format!(
                "array of shape {shape:?} given {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered map from parameter name to array, plus an update counter.
///
/// The name set and shapes are fixed once built; only values and
/// `iteration` change afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ParameterSet {
    entries: IndexMap<String, ParamArray>,
    pub iteration: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new array. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, array: ParamArray) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Structure(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.entries.get_mut(name)
    }

    #[inline]
    pub fn array(&self, index: usize) -> &ParamArray {
        &self.entries[index]
    }

    #[inline]
    pub fn array_mut(&mut self, index: usize) -> &mut ParamArray {
        &mut self.entries[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamArray)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(ParamArray::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|a| a.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that `other` has the same names, order, and shapes.
    pub fn check_same_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structure(format!(
                "parameter count {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::Structure(format!("parameter {na} vs {nb}")));
            }
            if a.shape != b.shape {
                return Err(Error::Structure(format!(
                    "parameter {na} shape {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            arrays: self.entries.values().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    /// Bitwise equality of every value, ignoring `iteration`.
    pub fn values_bit_equal(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(other.entries.iter()).all(
                |((na, a), (nb, b))| {
                    na == nb
                        && a.shape == b.shape
                        && a
                            .data
                            .iter()
                            .zip(&b.data)
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                },
            )
    }
}

/// Gradient buffers aligned index-for-index with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub arrays: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.arrays {
            a.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn fill_zero(&mut self) {
        for a in &mut self.arrays {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays
            .iter()
            .flat_map(|a| a.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}
