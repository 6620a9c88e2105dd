//! Permutations stored as index vectors.
//!
//! A permutation `p` acts on a vector by pulling: `(P v)[i] = v[p(i)]`, so the
//! equivalent dense matrix has a one at `(i, p(i))`. Under that convention the
//! matrix product `P_a P_b` is the index vector `i -> b(a(i))`, which is
//! `compose(b, a)`.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    indices: Vec<usize>,
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&self.indices, f)
    }
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            indices: (0..n).collect(),
        }
    }

    /// Validates that `indices` is a bijection on `0..indices.len()`.
    pub fn from_vec(indices: Vec<usize>) -> Result<Self> {
        let len = indices.len();
        let mut seen = vec![false; len];
        for &index in &indices {
            if index >= len {
                return Err(Error::IndexOutOfRange { index, len });
            }
            if std::mem::replace(&mut seen[index], true) {
                return Err(Error::DuplicateIndex { index, len });
            }
        }
        Ok(Permutation { indices })
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(rng);
        Permutation { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(i, &p)| i == p)
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.indices[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.indices
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &p) in self.indices.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { indices: inv }
    }

    /// `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(Permutation {
            indices: other.indices.iter().map(|&j| self.indices[j]).collect(),
        })
    }

    /// Gathers `values` so that `out[i] = values[p(i)]`.
    pub fn apply<T: Clone>(&self, values: &[T]) -> Result<Vec<T>> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: values.len(),
            });
        }
        Ok(self.indices.iter().map(|&j| values[j].clone()).collect())
    }

    /// Number of positions where `self` and `other` agree.
    pub fn agreement(&self, other: &Permutation) -> usize {
        self.indices
            .iter()
            .zip(&other.indices)
            .filter(|(a, b)| a == b)
            .count()
    }
}

pub fn compose(a: &Permutation, b: &Permutation) -> Result<Permutation> {
    a.compose(b)
}

pub fn inverse(a: &Permutation) -> Permutation {
    a.inverse()
}
