//! Which permutation variable acts on which axis of which tensor.
//!
//! Per block `i`, with `P_in` the stream permutation entering the block:
//!
//! | tensor            | rows       | cols        |
//! |-------------------|------------|-------------|
//! | attn.{q,k,v}      | `P_attn`   | `P_inᵀ`     |
//! | attn.out          | `P_W0`     | `P_attnᵀ`   |
//! | mlp.fc1           | `P_W1`     | `P_W0ᵀ`     |
//! | mlp.fc2           | `P_W2`     | `P_W1ᵀ`     |
//!
//! Biases and LayerNorm vectors follow their row permutation. `P_in` is the
//! embedding permutation for block 0 and the previous block's `P_W2` after
//! that; the classifier's columns take the last `P_W2ᵀ` and its rows are
//! never permuted.
//!
//! In compose mode the skip connections carry `𝓘_i = P_W0 P_inᵀ` and
//! `𝓘_out = P_W2 P_W0ᵀ`. In tie mode `P_in`, `P_W0` and `P_W2` are one shared
//! stream variable, so identity skips stay valid.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::Rng;

use crate::attention::BlockPermutation;
use crate::error::{Error, Result};
use crate::linalg::{permute_cols, permute_rows};
use crate::permutation::Permutation;
use crate::weights::{names, ArchSpec, Tensor, TaskVector, WeightSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ResidualMode {
    #[default]
    Compose,
    Tie,
}

impl std::str::FromStr for ResidualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compose" => Ok(ResidualMode::Compose),
            "tie" => Ok(ResidualMode::Tie),
            other => Err(Error::InvalidArgument(format!(
                "unknown residual mode `{other}` (expected compose or tie)"
            ))),
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::Compose => "compose",
            ResidualMode::Tie => "tie",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Rows,
    Cols,
}

/// `Forward` applies `P` (`P W` on rows, `W P` on cols), `Inverse` applies `Pᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariableKind {
    /// Residual-stream or hidden-unit permutation.
    Plain,
    /// Attention output units, structured into heads.
    Attention { heads: usize, head_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationVariable {
    pub id: String,
    pub size: usize,
    pub kind: VariableKind,
    /// Pinned variables are held at their initial value by the matcher.
    pub pinned: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Application {
    pub tensor: String,
    pub axis: Axis,
    pub variable: String,
    pub direction: Direction,
}

/// Variable ids whose compositions replace the identity skips of one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualRule {
    pub block: usize,
    pub input: String,
    pub attn_out: String,
    pub mlp_out: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphOptions {
    pub residual_mode: ResidualMode,
    /// Pin the embedding-side stream permutation to its initial value.
    pub pin_input: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            residual_mode: ResidualMode::Compose,
            pin_input: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CouplingGraph {
    arch: ArchSpec,
    mode: ResidualMode,
    variables: Vec<PermutationVariable>,
    applications: Vec<Application>,
    residual_rules: Vec<ResidualRule>,
}

pub mod ids {
    pub const EMBED: &str = "embed";
    pub const STREAM: &str = "stream";

    pub fn attn(block: usize) -> String {
        format!("block.{block}.attn")
    }

    pub fn attn_out(block: usize) -> String {
        format!("block.{block}.attn_out")
    }

    pub fn mlp_hidden(block: usize) -> String {
        format!("block.{block}.mlp_hidden")
    }

    pub fn mlp_out(block: usize) -> String {
        format!("block.{block}.mlp_out")
    }
}

pub fn build_coupling_graph(arch: &ArchSpec, opts: GraphOptions) -> Result<CouplingGraph> {
    arch.validate()?;
    let (dm, dh) = (arch.embed_dim, arch.mlp_hidden);
    let mut variables = Vec::new();
    let mut applications = Vec::new();
    let mut residual_rules = Vec::new();
    let plain = |id: String, size: usize, pinned: bool| PermutationVariable {
        id,
        size,
        kind: VariableKind::Plain,
        pinned,
    };
    let mut apply = |tensor: String, axis: Axis, variable: &str| {
        let direction = match axis {
            Axis::Rows => Direction::Forward,
            Axis::Cols => Direction::Inverse,
        };
        applications.push(Application {
            tensor,
            axis,
            variable: variable.to_string(),
            direction,
        });
    };

    let tie = opts.residual_mode == ResidualMode::Tie;
    let input_id = if tie { ids::STREAM } else { ids::EMBED };
    variables.push(plain(input_id.to_string(), dm, opts.pin_input));
    apply(names::EMBED_WEIGHT.to_string(), Axis::Rows, input_id);

    let mut incoming = input_id.to_string();
    for i in 0..arch.n_blocks {
        let attn = ids::attn(i);
        let hidden = ids::mlp_hidden(i);
        let (w0, w2) = if tie {
            (ids::STREAM.to_string(), ids::STREAM.to_string())
        } else {
            (ids::attn_out(i), ids::mlp_out(i))
        };
        variables.push(PermutationVariable {
            id: attn.clone(),
            size: dm,
            kind: VariableKind::Attention {
                heads: arch.n_heads,
                head_dim: arch.head_dim(),
            },
            pinned: false,
        });
        if !tie {
            variables.push(plain(w0.clone(), dm, false));
        }
        variables.push(plain(hidden.clone(), dh, false));
        if !tie {
            variables.push(plain(w2.clone(), dm, false));
        }

        for proj in ["q", "k", "v"] {
            apply(names::attn_weight(i, proj), Axis::Rows, &attn);
            apply(names::attn_weight(i, proj), Axis::Cols, &incoming);
            apply(names::attn_bias(i, proj), Axis::Rows, &attn);
        }
        apply(names::attn_weight(i, "out"), Axis::Rows, &w0);
        apply(names::attn_weight(i, "out"), Axis::Cols, &attn);
        apply(names::attn_bias(i, "out"), Axis::Rows, &w0);
        if arch.has_layernorm {
            apply(names::ln_gain(i, 1), Axis::Rows, &w0);
            apply(names::ln_bias(i, 1), Axis::Rows, &w0);
        }
        apply(names::fc_weight(i, 1), Axis::Rows, &hidden);
        apply(names::fc_weight(i, 1), Axis::Cols, &w0);
        apply(names::fc_bias(i, 1), Axis::Rows, &hidden);
        apply(names::fc_weight(i, 2), Axis::Rows, &w2);
        apply(names::fc_weight(i, 2), Axis::Cols, &hidden);
        apply(names::fc_bias(i, 2), Axis::Rows, &w2);
        if arch.has_layernorm {
            apply(names::ln_gain(i, 2), Axis::Rows, &w2);
            apply(names::ln_bias(i, 2), Axis::Rows, &w2);
        }
        if !tie {
            residual_rules.push(ResidualRule {
                block: i,
                input: incoming.clone(),
                attn_out: w0.clone(),
                mlp_out: w2.clone(),
            });
        }
        incoming = w2;
    }
    apply(names::HEAD_WEIGHT.to_string(), Axis::Cols, &incoming);

    let graph = CouplingGraph {
        arch: *arch,
        mode: opts.residual_mode,
        variables,
        applications,
        residual_rules,
    };
    graph.validate()?;
    Ok(graph)
}

impl CouplingGraph {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn residual_mode(&self) -> ResidualMode {
        self.mode
    }

    pub fn variables(&self) -> &[PermutationVariable] {
        &self.variables
    }

    pub fn free_variables(&self) -> impl Iterator<Item = &PermutationVariable> {
        self.variables.iter().filter(|v| !v.pinned)
    }

    pub fn applications(&self) -> &[Application] {
        &self.applications
    }

    pub fn residual_rules(&self) -> &[ResidualRule] {
        &self.residual_rules
    }

    pub fn variable(&self, id: &str) -> Result<&PermutationVariable> {
        self.variables
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::UnknownVariable(id.to_string()))
    }

    pub fn applications_of<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Application> {
        self.applications.iter().filter(move |a| a.variable == id)
    }

    /// Variable governing `axis` of `tensor`, if any.
    pub fn governing(&self, tensor: &str, axis: Axis) -> Option<&str> {
        self.applications
            .iter()
            .find(|a| a.tensor == tensor && a.axis == axis)
            .map(|a| a.variable.as_str())
    }

    /// Structural checks: one variable per axis, sizes agree with shapes, and
    /// every variable that permutes outputs is undone by some input axis.
    pub fn validate(&self) -> Result<()> {
        let shapes: BTreeMap<String, Vec<usize>> = self.arch.tensor_shapes().into_iter().collect();
        let mut seen = HashSet::new();
        for app in &self.applications {
            if !seen.insert((app.tensor.as_str(), app.axis)) {
                return Err(Error::InvalidArgument(format!(
                    "axis {:?} of `{}` is governed twice",
                    app.axis, app.tensor
                )));
            }
            let shape = shapes
                .get(&app.tensor)
                .ok_or_else(|| Error::MissingTensor(app.tensor.clone()))?;
            let len = match (app.axis, shape.as_slice()) {
                (Axis::Rows, [n, ..]) => *n,
                (Axis::Cols, [_, c]) => *c,
                _ => {
                    return Err(Error::shape(&app.tensor, "no such axis to permute"));
                }
            };
            let var = self.variable(&app.variable)?;
            if var.size != len {
                return Err(Error::shape(
                    &app.tensor,
                    format!("variable `{}` has size {}, axis has {len}", var.id, var.size),
                ));
            }
        }
        for var in &self.variables {
            let apps: Vec<_> = self.applications_of(&var.id).collect();
            let forward = apps.iter().any(|a| a.direction == Direction::Forward);
            let inverse = apps.iter().any(|a| a.direction == Direction::Inverse);
            if forward != inverse {
                return Err(Error::InvalidArgument(format!(
                    "variable `{}` is not undone downstream",
                    var.id
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for CouplingGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# residual mode: {}", self.mode)?;
        writeln!(f, "# variables")?;
        for v in &self.variables {
            let kind = match v.kind {
                VariableKind::Plain => "plain".to_string(),
                VariableKind::Attention { heads, head_dim } => {
                    format!("attention heads={heads} head_dim={head_dim}")
                }
            };
            let pinned = if v.pinned { " pinned" } else { "" };
            writeln!(f, "{} size={} {kind}{pinned}", v.id, v.size)?;
        }
        writeln!(f, "# applications")?;
        for a in &self.applications {
            let axis = match a.axis {
                Axis::Rows => "rows",
                Axis::Cols => "cols",
            };
            let dir = match a.direction {
                Direction::Forward => "P",
                Direction::Inverse => "P^T",
            };
            writeln!(f, "{} {axis} {} {dir}", a.tensor, a.variable)?;
        }
        if !self.residual_rules.is_empty() {
            writeln!(f, "# residual compositions")?;
            for r in &self.residual_rules {
                writeln!(
                    f,
                    "block.{} first={}*{}^T second={}*{}^T",
                    r.block, r.attn_out, r.input, r.mlp_out, r.attn_out
                )?;
            }
        }
        Ok(())
    }
}

/// Value of one permutation variable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VarPerm {
    Plain(Permutation),
    Block(BlockPermutation),
}

impl VarPerm {
    pub fn flat(&self) -> &Permutation {
        match self {
            VarPerm::Plain(p) => p,
            VarPerm::Block(b) => b.flattened(),
        }
    }

    pub fn inverse(&self) -> VarPerm {
        match self {
            VarPerm::Plain(p) => VarPerm::Plain(p.inverse()),
            VarPerm::Block(b) => VarPerm::Block(b.inverse()),
        }
    }
}

/// Map from variable id to its permutation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PermutationAssignment {
    perms: BTreeMap<String, VarPerm>,
}

impl PermutationAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn identity(graph: &CouplingGraph) -> Self {
        let perms = graph
            .variables
            .iter()
            .map(|v| {
                let p = match v.kind {
                    VariableKind::Plain => VarPerm::Plain(Permutation::identity(v.size)),
                    VariableKind::Attention { heads, head_dim } => {
                        VarPerm::Block(BlockPermutation::identity(heads, head_dim))
                    }
                };
                (v.id.clone(), p)
            })
            .collect();
        PermutationAssignment { perms }
    }

    /// Uniformly random structured assignment; pinned variables stay identity.
    pub fn random<R: Rng + ?Sized>(graph: &CouplingGraph, rng: &mut R) -> Self {
        let mut a = Self::identity(graph);
        for v in graph.free_variables() {
            let p = match v.kind {
                VariableKind::Plain => VarPerm::Plain(Permutation::random(v.size, rng)),
                VariableKind::Attention { heads, head_dim } => {
                    VarPerm::Block(BlockPermutation::random(heads, head_dim, rng))
                }
            };
            a.perms.insert(v.id.clone(), p);
        }
        a
    }

    pub fn insert(&mut self, id: impl Into<String>, p: VarPerm) -> Option<VarPerm> {
        self.perms.insert(id.into(), p)
    }

    pub fn get(&self, id: &str) -> Option<&VarPerm> {
        self.perms.get(id)
    }

    pub fn flat(&self, id: &str) -> Result<&Permutation> {
        self.perms
            .get(id)
            .map(VarPerm::flat)
            .ok_or_else(|| Error::IncompleteAssignment(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &VarPerm)> {
        self.perms.iter()
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn inverse(&self) -> Self {
        PermutationAssignment {
            perms: self
                .perms
                .iter()
                .map(|(k, v)| (k.clone(), v.inverse()))
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perms.values().all(|p| p.flat().is_identity())
    }

    /// Complete over `graph`, no unknown ids, sizes match.
    pub fn check_against(&self, graph: &CouplingGraph) -> Result<()> {
        for id in self.perms.keys() {
            graph.variable(id)?;
        }
        for v in &graph.variables {
            let p = self.flat(&v.id)?;
            if p.len() != v.size {
                return Err(Error::LengthMismatch {
                    expected: v.size,
                    actual: p.len(),
                });
            }
            if let (VariableKind::Attention { heads, head_dim }, Some(VarPerm::Block(b))) =
                (v.kind, self.perms.get(&v.id))
            {
                if b.heads() != heads || b.head_dim() != head_dim {
                    return Err(Error::DimensionMismatch(format!(
                        "`{}` expects {heads} heads of {head_dim}",
                        v.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of indices where `self` and `other` agree, and the total
    /// compared, over the given variables (flattened).
    pub fn agreement<'a>(
        &self,
        other: &PermutationAssignment,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<(usize, usize)> {
        let mut hits = 0;
        let mut total = 0;
        for id in ids {
            let (a, b) = (self.flat(id)?, other.flat(id)?);
            hits += a.agreement(b);
            total += a.len();
        }
        Ok((hits, total))
    }
}

pub(crate) fn permute_tensor(t: &Tensor, axis: Axis, direction: Direction, p: &Permutation) -> Result<Tensor> {
    // Rows: P W gathers with p, Pᵀ W with p⁻¹. Cols: W Pᵀ gathers with p,
    // W P with p⁻¹.
    let gather = match (axis, direction) {
        (Axis::Rows, Direction::Forward) | (Axis::Cols, Direction::Inverse) => p.clone(),
        (Axis::Rows, Direction::Inverse) | (Axis::Cols, Direction::Forward) => p.inverse(),
    };
    match (t.shape.len(), axis) {
        (1, Axis::Rows) => Tensor::new(t.shape.clone(), gather.apply(&t.data)?),
        (2, Axis::Rows) => Ok(Tensor::from_matrix(permute_rows(&t.to_matrix()?, &gather)?)),
        (2, Axis::Cols) => Ok(Tensor::from_matrix(permute_cols(&t.to_matrix()?, &gather)?)),
        _ => Err(Error::DimensionMismatch(format!(
            "cannot permute {axis:?} of a tensor with shape {:?}",
            t.shape
        ))),
    }
}

/// Executes every application record of `graph` on `ws`.
pub fn apply_assignment(
    ws: &WeightSet,
    graph: &CouplingGraph,
    a: &PermutationAssignment,
) -> Result<WeightSet> {
    if ws.arch() != graph.arch() {
        return Err(Error::ArchMismatch(
            "weight set and coupling graph were built for different architectures".into(),
        ));
    }
    a.check_against(graph)?;
    let (arch, mut tensors) = ws.clone().into_parts();
    for app in &graph.applications {
        let p = a.flat(&app.variable)?;
        let t = tensors
            .get_mut(&app.tensor)
            .ok_or_else(|| Error::MissingTensor(app.tensor.clone()))?;
        *t = permute_tensor(t, app.axis, app.direction, p)?;
    }
    Ok(WeightSet::from_parts_unchecked(arch, tensors))
}

pub fn apply_to_task_vector(
    tv: &TaskVector,
    graph: &CouplingGraph,
    a: &PermutationAssignment,
) -> Result<TaskVector> {
    Ok(TaskVector::from_deltas(apply_assignment(tv.deltas(), graph, a)?))
}

/// Skip-connection permutations of one block, as index vectors acting on the
/// residual stream (`(𝓘 v)[j] = v[𝓘(j)]`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualPerms {
    pub first: Permutation,
    pub second: Permutation,
}

/// `𝓘_i = P_W0 P_inᵀ` and `𝓘_out = P_W2 P_W0ᵀ` per block in compose mode;
/// `None` in tie mode, where skips stay identities.
pub fn residual_perms(
    graph: &CouplingGraph,
    a: &PermutationAssignment,
) -> Result<Option<Vec<ResidualPerms>>> {
    if graph.mode == ResidualMode::Tie {
        return Ok(None);
    }
    graph
        .residual_rules
        .iter()
        .map(|r| {
            let p_in = a.flat(&r.input)?;
            let p_w0 = a.flat(&r.attn_out)?;
            let p_w2 = a.flat(&r.mlp_out)?;
            // Matrix product P_a P_bᵀ is the index vector b⁻¹ ∘ a.
            Ok(ResidualPerms {
                first: p_in.inverse().compose(p_w0)?,
                second: p_w0.inverse().compose(p_w2)?,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}
