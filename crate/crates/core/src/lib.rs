//! Data-free permutation matching between transformer weight sets and
//! transport of fine-tuning task vectors across checkpoints.
//!
//! The pipeline is: describe the permutation symmetries of an architecture as
//! a [`CouplingGraph`], find the assignment that best aligns model A to model
//! B with [`weight_match`], then carry a task vector of A onto B with
//! [`transport`].

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod lap;
pub mod linalg;
pub mod matching;
pub mod permutation;
pub mod plant;
pub mod toy;
pub mod transport;
pub mod weights;

pub use attention::{align_heads, BlockPermutation, HeadView};
pub use error::{Error, Result};
pub use graph::{
    apply_assignment, build_coupling_graph, CouplingGraph, GraphOptions, PermutationAssignment,
    ResidualMode, VarPerm,
};
pub use lap::{solve_max, solve_min, CostMatrix};
pub use linalg::Matrix;
pub use matching::{soblap_objective, weight_match, MatchOptions, MatchResult};
pub use permutation::Permutation;
pub use transport::{compute_task_vector, merge_task_vectors, transport, ScalingSpec};
pub use weights::{ArchSpec, TaskVector, Tensor, WeightSet};
