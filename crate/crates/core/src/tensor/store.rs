use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Index of an entry inside a [`ParamStore`]. Stable for a given set of names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    offset: usize,
}

impl<T> ParamEntry<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offset of this tensor in the conceptual flat parameter vector.
    pub fn offset(&self) -> usize {
        self.offset
    }
}

/// Named, shaped trainable tensors, iterated in lexicographic name order.
///
/// The concatenation of all entries in that order is the flat parameter
/// vector; `flat_index(name)` gives each tensor's slice of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
    total: usize,
}

impl<T: Scalar> ParamStore<T> {
    /// Builds a store from `(name, shape, values)` triples in any order.
    pub fn from_tensors<I>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<usize>, Vec<T>)>,
    {
        let mut by_name = BTreeMap::new();
        for (name, shape, values) in tensors {
            let expect: usize = shape.iter().product();
            if expect != values.len() {
                return Err(Error::Structure(format!(
                    "tensor `{name}` has shape {shape:?} but {} values",
                    values.len()
                )));
            }
            if by_name.insert(name.clone(), (shape, values)).is_some() {
                return Err(Error::Structure(format!("duplicate tensor name `{name}`")));
            }
        }
        let mut entries = Vec::with_capacity(by_name.len());
        let mut index = BTreeMap::new();
        let mut offset = 0;
        for (i, (name, (shape, values))) in by_name.into_iter().enumerate() {
            let len = values.len();
            index.insert(name.clone(), i);
            entries.push(ParamEntry {
                name,
                shape,
                grad: vec![T::zero(); len],
                values,
                offset,
            });
            offset += len;
        }
        Ok(Self {
            entries,
            index,
            total: offset,
        })
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters, |θ|.
    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                name: name.to_string(),
            })
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        Ok(&self.entries[self.id(name)?.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id.0])
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    /// `(offset, length)` of `name` in the flat parameter vector.
    pub fn flat_index(&self, name: &str) -> Result<(usize, usize)> {
        let e = self.get(name)?;
        Ok((e.offset, e.len()))
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(&e.values);
        }
        out
    }

    pub fn flatten_grads(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(&e.grad);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Replaces every gradient array; `grads` must be aligned with `entries()`.
    pub fn set_grads(&mut self, grads: Vec<Vec<T>>) -> Result<()> {
        if grads.len() != self.entries.len() {
            return Err(Error::Structure(format!(
                "expected {} gradient arrays, got {}",
                self.entries.len(),
                grads.len()
            )));
        }
        for (e, g) in self.entries.iter_mut().zip(grads) {
            if g.len() != e.values.len() {
                return Err(Error::Structure(format!(
                    "gradient for `{}` has length {}, expected {}",
                    e.name,
                    g.len(),
                    e.values.len()
                )));
            }
            e.grad = g;
        }
        Ok(())
    }

    /// Same names and shapes as `other`.
    pub fn same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Numeric cast, e.g. to run a gradient check in double precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: e.values.iter().map(|v| U::lit(v.as_f64())).collect(),
                    grad: e.grad.iter().map(|v| U::lit(v.as_f64())).collect(),
                    offset: e.offset,
                })
                .collect(),
            index: self.index.clone(),
            total: self.total,
        }
    }

    /// Bitwise equality of all parameter values (gradients ignored).
    pub fn values_bit_equal(&self, other: &Self) -> bool {
        self.same_layout(other)
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
