//! Planted-permutation fixtures: a model, a hidden structured permutation of
//! it, optional noise, and scoring of how much of the plant a matcher found.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::BlockPermutation;
use crate::error::{Error, Result};
use crate::graph::{apply_assignment, CouplingGraph, PermutationAssignment, VarPerm, VariableKind};
use crate::permutation::Permutation;
use crate::weights::WeightSet;

/// Permutes `ws` by a uniformly random structured assignment and returns the
/// permuted copy with the assignment that produced it.
pub fn plant<R: Rng + ?Sized>(
    ws: &WeightSet,
    graph: &CouplingGraph,
    rng: &mut R,
) -> Result<(WeightSet, PermutationAssignment)> {
    let a = PermutationAssignment::random(graph, rng);
    Ok((apply_assignment(ws, graph, &a)?, a))
}

/// Adds Gaussian noise with standard deviation `sigma` times each tensor's own
/// standard deviation. Constant tensors are left untouched.
pub fn add_relative_noise<R: Rng + ?Sized>(ws: &WeightSet, sigma: f64, rng: &mut R) -> Result<WeightSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise level must be non-negative, got {sigma}")));
    }
    let mut out = ws.clone();
    for name in ws.tensors().keys() {
        let t = out.tensor_mut(name)?;
        let scale = sigma * t.std_dev();
        if scale > 0.0 {
            for v in t.data.iter_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(out)
}

/// Fraction of permuted indices over the graph's free variables where
/// `found` agrees with `planted`.
pub fn recovery_rate(
    found: &PermutationAssignment,
    planted: &PermutationAssignment,
    graph: &CouplingGraph,
) -> Result<f64> {
    let (hits, total) = found.agreement(planted, graph.free_variables().map(|v| v.id.as_str()))?;
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

fn is_block_structured(p: &Permutation, head_dim: usize) -> bool {
    (0..p.len() / head_dim).all(|h| {
        let target = p.get(h * head_dim) / head_dim;
        (h * head_dim..(h + 1) * head_dim).all(|i| p.get(i) / head_dim == target)
    })
}

/// A random structured assignment whose attention variable in `block` is
/// replaced by a flat permutation that moves units across head boundaries.
pub fn contaminated_assignment<R: Rng + ?Sized>(
    graph: &CouplingGraph,
    block: usize,
    rng: &mut R,
) -> Result<PermutationAssignment> {
    let id = crate::graph::ids::attn(block);
    let var = graph.variable(&id)?;
    let VariableKind::Attention { heads, head_dim } = var.kind else {
        return Err(Error::InvalidArgument(format!("`{id}` is not an attention variable")));
    };
    if heads < 2 {
        return Err(Error::InvalidArgument(
            "a single head cannot be contaminated across heads".into(),
        ));
    }
    let mut a = PermutationAssignment::random(graph, rng);
    let flat = loop {
        let p = Permutation::random(heads * head_dim, rng);
        if !is_block_structured(&p, head_dim) {
            break p;
        }
    };
    a.insert(id, VarPerm::Plain(flat));
    Ok(a)
}

/// Whether every attention variable of `a` keeps whole heads together.
pub fn respects_heads(a: &PermutationAssignment, graph: &CouplingGraph) -> Result<bool> {
    for v in graph.variables() {
        if let VariableKind::Attention { head_dim, .. } = v.kind {
            if !is_block_structured(a.flat(&v.id)?, head_dim) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Block permutation with its heads cyclically shifted by one and identity
/// units; convenient as a hand-made fixture.
pub fn shifted_heads(heads: usize, head_dim: usize) -> BlockPermutation {
    let inter = Permutation::from_vec((0..heads).map(|i| (i + 1) % heads).collect())
        .expect("cyclic shift is a bijection");
    BlockPermutation::new(inter, vec![Permutation::identity(head_dim); heads])
        .expect("sizes agree by construction")
}
