//! Task vectors and their transport onto another base checkpoint.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{apply_to_task_vector, CouplingGraph, PermutationAssignment};
use crate::weights::{ArchSpec, TaskVector, WeightSet};

/// Scaling of a transported task vector.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalingSpec {
    Scalar(f64),
    /// One factor per block. Embedding tensors take the first, the classifier
    /// head the last.
    PerLayer(Vec<f64>),
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec::Scalar(1.0)
    }
}

impl ScalingSpec {
    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        let values = match self {
            ScalingSpec::Scalar(a) => std::slice::from_ref(a),
            ScalingSpec::PerLayer(v) => {
                if v.len() != arch.n_blocks {
                    return Err(Error::LengthMismatch {
                        expected: arch.n_blocks,
                        actual: v.len(),
                    });
                }
                v.as_slice()
            }
        };
        match values.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            Some(a) => Err(Error::InvalidArgument(format!(
                "scaling factors must be finite and non-negative, got {a}"
            ))),
            None => Ok(()),
        }
    }

    /// Factor applied to tensor `name`.
    pub fn factor(&self, name: &str) -> f64 {
        match self {
            ScalingSpec::Scalar(a) => *a,
            ScalingSpec::PerLayer(v) => match ArchSpec::block_of(name) {
                Some(i) => v[i],
                None if name.starts_with("embed.") => v[0],
                None => v[v.len() - 1],
            },
        }
    }
}

impl FromStr for ScalingSpec {
    type Err = Error;

    /// One value per line; blank lines and `#` comments are skipped.
    fn from_str(s: &str) -> Result<Self> {
        let values = s
            .lines()
            .enumerate()
            .map(|(i, line)| (i + 1, line.split('#').next().unwrap_or("").trim()))
            .filter(|(_, line)| !line.is_empty())
            .map(|(n, line)| {
                line.parse::<f64>().map_err(|e| Error::InvalidArgument(format!(
                    "line {n}: `{line}` is not a number ({e})"
                )))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::InvalidArgument("scaling file holds no values".into()));
        }
        Ok(ScalingSpec::PerLayer(values))
    }
}

/// `τ = θ_ft − θ_base`.
pub fn compute_task_vector(finetuned: &WeightSet, base: &WeightSet) -> Result<TaskVector> {
    Ok(TaskVector::from_deltas(finetuned.sub(base)?))
}

/// `θ_B + α·π(τ)`, with `α` taken per tensor from `scaling`.
pub fn transport(
    base: &WeightSet,
    tau: &TaskVector,
    assignment: &PermutationAssignment,
    graph: &CouplingGraph,
    scaling: &ScalingSpec,
) -> Result<WeightSet> {
    base.ensure_same_arch(tau.deltas())?;
    scaling.validate(base.arch())?;
    let moved = apply_to_task_vector(tau, graph, assignment)?;
    let mut out = base.clone();
    for (name, delta) in moved.deltas().tensors() {
        let alpha = scaling.factor(name);
        if alpha == 0.0 {
            continue;
        }
        let t = out.tensor_mut(name)?;
        for (w, d) in t.data.iter_mut().zip(&delta.data) {
            *w += alpha * d;
        }
    }
    Ok(out)
}

/// `Σ_k w_k τ_k`.
pub fn merge_task_vectors(taus: &[TaskVector], weights: &[f64]) -> Result<TaskVector> {
    if taus.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: taus.len(),
            actual: weights.len(),
        });
    }
    let Some((first, rest)) = taus.split_first() else {
        return Err(Error::InvalidArgument("nothing to merge".into()));
    };
    let mut acc = first.deltas().scale(weights[0]);
    for (tau, &w) in rest.iter().zip(&weights[1..]) {
        acc = acc.zip_with(tau.deltas(), |x, y| x + w * y)?;
    }
    Ok(TaskVector::from_deltas(acc))
}
