//! Architecture description, canonical tensor names and the in-memory weight
//! containers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub has_layernorm: bool,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(Error::InvalidArch(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::InvalidArch(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Every canonical tensor name with its shape, in manifest order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, dh) = (self.embed_dim, self.mlp_hidden);
        let mut out = vec![("embed.weight".to_string(), vec![dm, self.input_dim])];
        for i in 0..self.n_blocks {
            for proj in ["q", "k", "v", "out"] {
                out.push((names::attn_weight(i, proj), vec![dm, dm]));
                out.push((names::attn_bias(i, proj), vec![dm]));
            }
            if self.has_layernorm {
                out.push((names::ln_gain(i, 1), vec![dm]));
                out.push((names::ln_bias(i, 1), vec![dm]));
            }
            out.push((names::fc_weight(i, 1), vec![dh, dm]));
            out.push((names::fc_bias(i, 1), vec![dh]));
            out.push((names::fc_weight(i, 2), vec![dm, dh]));
            out.push((names::fc_bias(i, 2), vec![dm]));
            if self.has_layernorm {
                out.push((names::ln_gain(i, 2), vec![dm]));
                out.push((names::ln_bias(i, 2), vec![dm]));
            }
        }
        out.push((names::HEAD_WEIGHT.to_string(), vec![self.output_dim, dm]));
        out.push((names::HEAD_BIAS.to_string(), vec![self.output_dim]));
        out
    }

    /// Block index owning a tensor, `None` for embedding and head tensors.
    pub fn block_of(name: &str) -> Option<usize> {
        name.strip_prefix("block.")?.split('.').next()?.parse().ok()
    }
}

pub mod names {
    pub const EMBED_WEIGHT: &str = "embed.weight";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    pub fn attn_weight(block: usize, proj: &str) -> String {
        format!("block.{block}.attn.{proj}.weight")
    }

    pub fn attn_bias(block: usize, proj: &str) -> String {
        format!("block.{block}.attn.{proj}.bias")
    }

    pub fn fc_weight(block: usize, layer: u8) -> String {
        format!("block.{block}.mlp.fc{layer}.weight")
    }

    pub fn fc_bias(block: usize, layer: u8) -> String {
        format!("block.{block}.mlp.fc{layer}.bias")
    }

    pub fn ln_gain(block: usize, which: u8) -> String {
        format!("block.{block}.ln{which}.gain")
    }

    pub fn ln_bias(block: usize, which: u8) -> String {
        format!("block.{block}.ln{which}.bias")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_matrix(m: Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.into_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.data.clone()),
            other => Err(Error::DimensionMismatch(format!(
                "expected a matrix, got shape {other:?}"
            ))),
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn std_dev(&self) -> f64 {
        let n = self.data.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let mean = self.data.iter().sum::<f64>() / n;
        (self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// A complete parameter set for an [`ArchSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    arch: ArchSpec,
    tensors: BTreeMap<String, Tensor>,
}

impl WeightSet {
    /// Builds a weight set, checking names, shapes and finiteness against `arch`.
    pub fn new(arch: ArchSpec, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let ws = WeightSet { arch, tensors };
        ws.validate()?;
        Ok(ws)
    }

    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(shape)))
            .collect();
        Ok(WeightSet { arch, tensors })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let expected = self.arch.tensor_shapes();
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if &t.shape != shape {
                return Err(Error::shape(
                    name,
                    format!("expected {shape:?}, found {:?}", t.shape),
                ));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::shape(name, "data length disagrees with shape"));
            }
            if let Some(index) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    index,
                });
            }
        }
        if self.tensors.len() != expected.len() {
            let known: std::collections::HashSet<&str> =
                expected.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = self.tensors.keys().find(|k| !known.contains(k.as_str())) {
                return Err(Error::UnexpectedTensor(extra.clone()));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        self.get(name)?.to_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.data)
    }

    /// Replaces an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape != tensor.shape {
            return Err(Error::shape(
                name,
                format!("cannot replace {:?} with {:?}", slot.shape, tensor.shape),
            ));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn ensure_same_arch(&self, other: &WeightSet) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch(format!(
                "{:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    /// Elementwise `f(self, other)` over every tensor.
    pub fn zip_with(&self, other: &WeightSet, f: impl Fn(f64, f64) -> f64) -> Result<WeightSet> {
        self.ensure_same_arch(other)?;
        let mut tensors = BTreeMap::new();
        for (name, a) in &self.tensors {
            let b = other.get(name)?;
            if a.shape != b.shape {
                return Err(Error::shape(name, "operands disagree"));
            }
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            tensors.insert(
                name.clone(),
                Tensor {
                    shape: a.shape.clone(),
                    data,
                },
            );
        }
        Ok(WeightSet {
            arch: self.arch,
            tensors,
        })
    }

    pub fn map(&self, mut f: impl FnMut(&str, f64) -> f64) -> WeightSet {
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            let data = t.data.iter().map(|&x| f(name, x)).collect();
            tensors.insert(
                name.clone(),
                Tensor {
                    shape: t.shape.clone(),
                    data,
                },
            );
        }
        WeightSet {
            arch: self.arch,
            tensors,
        }
    }

    pub fn add(&self, other: &WeightSet) -> Result<WeightSet> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &WeightSet) -> Result<WeightSet> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> WeightSet {
        self.map(|_, x| x * s)
    }

    /// `(1 − t)·self + t·other`.
    pub fn interpolate(&self, other: &WeightSet, t: f64) -> Result<WeightSet> {
        self.zip_with(other, |a, b| (1.0 - t) * a + t * b)
    }

    pub fn max_abs_diff(&self, other: &WeightSet) -> Result<f64> {
        let diff = self.zip_with(other, |a, b| (a - b).abs())?;
        Ok(diff
            .tensors
            .values()
            .flat_map(|t| t.data.iter().copied())
            .fold(0.0, f64::max))
    }

    pub(crate) fn into_parts(self) -> (ArchSpec, BTreeMap<String, Tensor>) {
        (self.arch, self.tensors)
    }

    pub(crate) fn from_parts_unchecked(arch: ArchSpec, tensors: BTreeMap<String, Tensor>) -> Self {
        WeightSet { arch, tensors }
    }
}

/// Per-tensor additive delta over the same key space as a [`WeightSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector(WeightSet);

impl TaskVector {
    pub fn from_deltas(deltas: WeightSet) -> Self {
        TaskVector(deltas)
    }

    pub fn deltas(&self) -> &WeightSet {
        &self.0
    }

    pub fn into_deltas(self) -> WeightSet {
        self.0
    }

    pub fn arch(&self) -> &ArchSpec {
        self.0.arch()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_arch() -> ArchSpec {
        ArchSpec {
            n_blocks: 1,
            n_heads: 2,
            embed_dim: 4,
            mlp_hidden: 6,
            input_dim: 3,
            output_dim: 2,
            has_layernorm: true,
        }
    }

    #[test]
    fn arch_validation() {
        assert!(toy_arch().validate().is_ok());
        let bad = ArchSpec {
            n_heads: 3,
            ..toy_arch()
        };
        assert!(matches!(bad.validate(), Err(Error::InvalidArch(_))));
        let empty = ArchSpec {
            n_blocks: 0,
            ..toy_arch()
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn canonical_names() {
        let shapes = toy_arch().tensor_shapes();
        assert_eq!(shapes.len(), 1 + 8 + 4 + 4 + 2);
        let no_ln = ArchSpec {
            has_layernorm: false,
            ..toy_arch()
        };
        assert_eq!(no_ln.tensor_shapes().len(), 1 + 8 + 4 + 2);
        assert_eq!(ArchSpec::block_of("block.12.mlp.fc1.weight"), Some(12));
        assert_eq!(ArchSpec::block_of("head.weight"), None);
    }

    #[test]
    fn validation_names_offender() {
        let mut ws = WeightSet::zeros(toy_arch()).unwrap();
        ws.tensors.remove("block.0.ln1.gain");
        assert!(matches!(ws.validate(), Err(Error::MissingTensor(n)) if n == "block.0.ln1.gain"));

        let mut ws = WeightSet::zeros(toy_arch()).unwrap();
        ws.tensor_mut("head.bias").unwrap().data[1] = f64::INFINITY;
        assert!(matches!(ws.validate(), Err(Error::NonFinite { name, index: 1 }) if name == "head.bias"));

        let mut ws = WeightSet::zeros(toy_arch()).unwrap();
        ws.tensors.insert("extra".into(), Tensor::zeros(vec![1]));
        assert!(matches!(ws.validate(), Err(Error::UnexpectedTensor(_))));
    }
}
