//! Coordinate-descent weight matching over a coupling graph.
//!
//! Each free variable in turn is re-solved with every other variable held
//! fixed: plain variables by a max-value LAP over the summed value matrix of
//! their applications, attention variables by two-stage head alignment. A
//! candidate replaces the current value only if it strictly raises the part of
//! the objective that depends on that variable, so the objective never drops
//! and the sweep terminates.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{align_heads, AlignOptions, HeadView, OutputCoupling};
use crate::error::{Error, Result};
use crate::graph::{
    apply_assignment, permute_tensor, Axis, CouplingGraph, Direction, PermutationAssignment,
    VarPerm, VariableKind,
};
use crate::lap::{solve_max, CostMatrix};
use crate::linalg::{frobenius_inner, Matrix};
use crate::permutation::Permutation;
use crate::weights::{Tensor, WeightSet};

/// Relative margin a candidate must clear to replace the current value.
const IMPROVEMENT_MARGIN: f64 = 1e-12;

thread_local! {
    static INVOCATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of matcher runs started on the current thread.
pub fn match_invocations() -> usize {
    INVOCATIONS.with(Cell::get)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchOptions {
    pub max_sweeps: usize,
    pub seed: u64,
    pub p_norm: f64,
    /// Adds the output-projection coupling to the intra-head value matrix.
    pub include_w0_in_intra: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            max_sweeps: 50,
            seed: 0,
            p_norm: 2.0,
            include_w0_in_intra: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRecord {
    pub sweep: usize,
    pub objective: f64,
    pub changed: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub assignment: PermutationAssignment,
    /// Record 0 holds the starting objective; one record per sweep follows.
    pub trace: Vec<SweepRecord>,
    pub converged: bool,
}

impl MatchResult {
    pub fn final_objective(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn sweeps(&self) -> usize {
        self.trace.len() - 1
    }

    /// `sweep objective changed`, one line per record.
    pub fn trace_text(&self) -> String {
        let mut out = String::from("# sweep objective changed\n");
        for r in &self.trace {
            let _ = writeln!(out, "{} {:.17e} {}", r.sweep, r.objective, r.changed);
        }
        out
    }
}

fn check_inputs(a: &WeightSet, b: &WeightSet, graph: &CouplingGraph) -> Result<()> {
    a.ensure_same_arch(b)?;
    if a.arch() != graph.arch() {
        return Err(Error::ArchMismatch(
            "weight sets and coupling graph were built for different architectures".into(),
        ));
    }
    a.validate()?;
    b.validate()
}

/// `a`'s tensor with every application applied except those of `skip`.
fn partially_permuted(
    a: &WeightSet,
    graph: &CouplingGraph,
    assignment: &PermutationAssignment,
    tensor: &str,
    skip: &str,
) -> Result<Tensor> {
    let mut t = a.get(tensor)?.clone();
    for app in graph.applications() {
        if app.tensor == tensor && app.variable != skip {
            t = permute_tensor(&t, app.axis, app.direction, assignment.flat(&app.variable)?)?;
        }
    }
    Ok(t)
}

fn weight_tensors_of<'a>(graph: &'a CouplingGraph, a: &'a WeightSet, id: &'a str) -> BTreeSet<&'a str> {
    graph
        .applications_of(id)
        .filter(|app| a.get(&app.tensor).is_ok_and(Tensor::is_matrix))
        .map(|app| app.tensor.as_str())
        .collect()
}

/// Part of the objective contributed by tensors touching variable `id`.
fn local_objective(
    a: &WeightSet,
    b: &WeightSet,
    graph: &CouplingGraph,
    assignment: &PermutationAssignment,
    id: &str,
) -> Result<f64> {
    let mut total = 0.0;
    for tensor in weight_tensors_of(graph, a, id) {
        let pa = partially_permuted(a, graph, assignment, tensor, "")?;
        total += frobenius_inner(&b.matrix(tensor)?, &pa.to_matrix()?)?;
    }
    Ok(total)
}

/// Best value of plain variable `id` with all other variables fixed.
pub fn solve_mlp_variable(
    id: &str,
    a: &WeightSet,
    b: &WeightSet,
    assignment: &PermutationAssignment,
    graph: &CouplingGraph,
) -> Result<Permutation> {
    let var = graph.variable(id)?;
    if var.kind != VariableKind::Plain {
        return Err(Error::InvalidArgument(format!(
            "`{id}` is an attention variable; use head alignment"
        )));
    }
    let n = var.size;
    let mut value = Matrix::zeros(n, n);
    for app in graph.applications_of(id) {
        let tb = b.get(&app.tensor)?;
        if !tb.is_matrix() {
            continue;
        }
        let wb = tb.to_matrix()?;
        let wa = partially_permuted(a, graph, assignment, &app.tensor, id)?.to_matrix()?;
        // value[i][j]: gain from sending unit j of A to slot i of B.
        let contribution = match (app.axis, app.direction) {
            (Axis::Rows, Direction::Forward) => wb.matmul_t(&wa)?,
            (Axis::Cols, Direction::Inverse) => wb.t_matmul(&wa)?,
            (Axis::Rows, Direction::Inverse) => wa.matmul_t(&wb)?,
            (Axis::Cols, Direction::Forward) => wa.t_matmul(&wb)?,
        };
        value.add_assign(&contribution);
    }
    Ok(solve_max(&CostMatrix::new(value)?).permutation)
}

fn solve_attention_variable(
    id: &str,
    a: &WeightSet,
    b: &WeightSet,
    assignment: &PermutationAssignment,
    graph: &CouplingGraph,
    opts: &MatchOptions,
    heads: usize,
) -> Result<VarPerm> {
    let mut projections = Vec::new();
    let mut output = None;
    for app in graph.applications_of(id) {
        if !b.get(&app.tensor)?.is_matrix() {
            continue;
        }
        match app.axis {
            Axis::Rows => projections.push(app.tensor.as_str()),
            Axis::Cols => output = Some(app.tensor.as_str()),
        }
    }
    let [q, k, v] = projections[..] else {
        return Err(Error::InvalidArgument(format!(
            "`{id}` must govern exactly three projection matrices"
        )));
    };
    let view_a = {
        let m = |t| partially_permuted(a, graph, assignment, t, id)?.to_matrix();
        HeadView::new(&m(q)?, &m(k)?, &m(v)?, heads)?
    };
    let view_b = HeadView::new(&b.matrix(q)?, &b.matrix(k)?, &b.matrix(v)?, heads)?;
    let output_coupling = match (opts.include_w0_in_intra, output) {
        (true, Some(t)) => Some(OutputCoupling {
            out_b: b.matrix(t)?,
            out_a: partially_permuted(a, graph, assignment, t, id)?.to_matrix()?,
        }),
        _ => None,
    };
    let align = AlignOptions {
        p_norm: opts.p_norm,
        output_coupling,
    };
    Ok(VarPerm::Block(align_heads(&view_a, &view_b, &align)?))
}

/// Sum over weight matrices of `⟨W_B, π(W_A)⟩`. Vectors are left out, as in
/// the matching costs.
pub fn soblap_objective(
    a: &WeightSet,
    b: &WeightSet,
    assignment: &PermutationAssignment,
    graph: &CouplingGraph,
) -> Result<f64> {
    let permuted = apply_assignment(a, graph, assignment)?;
    let mut total = 0.0;
    for (name, tb) in b.tensors() {
        if tb.is_matrix() {
            total += frobenius_inner(&tb.to_matrix()?, &permuted.matrix(name)?)?;
        }
    }
    Ok(total)
}

/// Aligns `a` onto `b` starting from the identity assignment.
pub fn weight_match(
    a: &WeightSet,
    b: &WeightSet,
    graph: &CouplingGraph,
    opts: &MatchOptions,
) -> Result<MatchResult> {
    weight_match_from(a, b, graph, opts, PermutationAssignment::identity(graph))
}

/// Aligns `a` onto `b` starting from `initial`.
pub fn weight_match_from(
    a: &WeightSet,
    b: &WeightSet,
    graph: &CouplingGraph,
    opts: &MatchOptions,
    initial: PermutationAssignment,
) -> Result<MatchResult> {
    INVOCATIONS.with(|c| c.set(c.get() + 1));
    if opts.max_sweeps == 0 {
        return Err(Error::InvalidArgument("max_sweeps must be at least 1".into()));
    }
    check_inputs(a, b, graph)?;
    initial.check_against(graph)?;

    let mut assignment = initial;
    let mut order: Vec<_> = graph.free_variables().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = vec![SweepRecord {
        sweep: 0,
        objective: soblap_objective(a, b, &assignment, graph)?,
        changed: 0,
    }];
    let mut converged = false;

    for sweep in 1..=opts.max_sweeps {
        order.shuffle(&mut rng);
        let mut changed = 0;
        for var in &order {
            let candidate = match var.kind {
                VariableKind::Plain => {
                    VarPerm::Plain(solve_mlp_variable(&var.id, a, b, &assignment, graph)?)
                }
                VariableKind::Attention { heads, .. } => {
                    solve_attention_variable(&var.id, a, b, &assignment, graph, opts, heads)?
                }
            };
            if assignment.flat(&var.id)? == candidate.flat() {
                continue;
            }
            let before = local_objective(a, b, graph, &assignment, &var.id)?;
            let previous = assignment.insert(var.id.clone(), candidate);
            let after = local_objective(a, b, graph, &assignment, &var.id)?;
            if after > before + IMPROVEMENT_MARGIN * before.abs().max(1.0) {
                changed += 1;
            } else if let Some(p) = previous {
                assignment.insert(var.id.clone(), p);
            }
        }
        trace.push(SweepRecord {
            sweep,
            objective: soblap_objective(a, b, &assignment, graph)?,
            changed,
        });
        if changed == 0 {
            converged = true;
            break;
        }
    }

    Ok(MatchResult {
        assignment,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_coupling_graph, GraphOptions, ResidualMode};
    use crate::plant::plant;
    use crate::toy::init_random;
    use crate::weights::ArchSpec;

    fn arch() -> ArchSpec {
        ArchSpec {
            n_blocks: 2,
            n_heads: 2,
            embed_dim: 8,
            mlp_hidden: 12,
            input_dim: 5,
            output_dim: 3,
            has_layernorm: true,
        }
    }

    #[test]
    fn self_match_is_identity_in_one_sweep() {
        let ws = init_random(&arch(), 1).unwrap();
        for mode in [ResidualMode::Compose, ResidualMode::Tie] {
            let g = build_coupling_graph(&arch(), GraphOptions { residual_mode: mode, ..Default::default() }).unwrap();
            let r = weight_match(&ws, &ws, &g, &MatchOptions::default()).unwrap();
            assert!(r.assignment.is_identity());
            assert!(r.converged);
            assert_eq!(r.sweeps(), 1);
        }
    }

    #[test]
    fn objective_of_identity_self_match_is_squared_norm() {
        let ws = init_random(&arch(), 2).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        let expect: f64 = ws
            .tensors()
            .values()
            .filter(|t| t.is_matrix())
            .map(|t| t.data.iter().map(|x| x * x).sum::<f64>())
            .sum();
        let got = soblap_objective(&ws, &ws, &PermutationAssignment::identity(&g), &g).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn zero_weights_give_identity() {
        let ws = WeightSet::zeros(arch()).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        let a = PermutationAssignment::identity(&g);
        let p = solve_mlp_variable("block.0.mlp_hidden", &ws, &ws, &a, &g).unwrap();
        assert!(p.is_identity());
    }

    #[test]
    fn recovers_single_planted_hidden_permutation() {
        let ws = init_random(&arch(), 3).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        let mut planted = PermutationAssignment::identity(&g);
        let p = Permutation::from_vec(vec![3, 0, 11, 5, 2, 7, 1, 10, 4, 9, 6, 8]).unwrap();
        planted.insert("block.1.mlp_hidden", VarPerm::Plain(p.clone()));
        let b = apply_assignment(&ws, &g, &planted).unwrap();
        let found =
            solve_mlp_variable("block.1.mlp_hidden", &ws, &b, &PermutationAssignment::identity(&g), &g)
                .unwrap();
        assert_eq!(found, p);
    }

    #[test]
    fn unknown_and_attention_variables_are_rejected() {
        let ws = init_random(&arch(), 1).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        let a = PermutationAssignment::identity(&g);
        assert!(matches!(
            solve_mlp_variable("nope", &ws, &ws, &a, &g),
            Err(Error::UnknownVariable(_))
        ));
        assert!(solve_mlp_variable("block.0.attn", &ws, &ws, &a, &g).is_err());
    }

    #[test]
    fn planted_model_is_recovered_exactly() {
        let ws = init_random(&arch(), 4).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (b, planted) = plant(&ws, &g, &mut rng).unwrap();
        let r = weight_match(&ws, &b, &g, &MatchOptions::default()).unwrap();
        assert_eq!(r.assignment, planted);
        assert!(r.converged);
    }

    #[test]
    fn arch_mismatch_is_reported() {
        let a = init_random(&arch(), 1).unwrap();
        let other = ArchSpec { n_heads: 4, ..arch() };
        let b = init_random(&other, 1).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        assert!(matches!(
            weight_match(&a, &b, &g, &MatchOptions::default()),
            Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn trace_text_lists_every_sweep() {
        let ws = init_random(&arch(), 1).unwrap();
        let g = build_coupling_graph(&arch(), GraphOptions::default()).unwrap();
        let r = weight_match(&ws, &ws, &g, &MatchOptions::default()).unwrap();
        let text = r.trace_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("1 "));
        assert!(text.lines().nth(2).unwrap().ends_with(" 0"));
    }
}
