//! Exact square linear assignment.
//!
//! Shortest augmenting paths with row/column potentials (Jonker–Volgenant
//! style, O(n³)). The potentials certify optimality: every optimal assignment
//! uses only edges whose reduced cost is zero, so ties are resolved afterwards
//! by picking the lexicographically smallest perfect matching in that tight
//! subgraph.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::permutation::Permutation;

/// Square matrix of finite costs (or values, for the max form).
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch(format!(
                "assignment requires a square matrix, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if m.rows() == 0 {
            return Err(Error::InvalidArgument("empty cost matrix".into()));
        }
        if let Some(index) = m.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: "cost matrix".into(),
                index,
            });
        }
        Ok(CostMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        CostMatrix::new(Matrix::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    /// `Σ_i c[i, p(i)]`, summed in row order.
    pub fn total(&self, p: &Permutation) -> f64 {
        (0..self.n()).map(|i| self.0[(i, p.get(i))]).sum()
    }

    fn negated(&self) -> CostMatrix {
        CostMatrix(self.0.scale(-1.0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Row `i` is assigned column `permutation.get(i)`.
    pub permutation: Permutation,
    pub total: f64,
}

/// Minimises `Σ_i c[i, p(i)]`; ties go to the lexicographically smallest `p`.
pub fn solve_min(c: &CostMatrix) -> Assignment {
    let n = c.n();
    let m = c.matrix();
    let (row_to_col, u, v) = shortest_augmenting_paths(m);

    let scale = m.as_slice().iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| m[(i, j)] - u[i] - v[j] <= tol)
                .collect()
        })
        .collect();

    let base = Permutation::from_vec(row_to_col.clone()).expect("solver yields a bijection");
    let base_total = c.total(&base);
    let lex = Permutation::from_vec(lexicographic_matching(row_to_col, &tight))
        .expect("tie-break keeps a bijection");
    let lex_total = c.total(&lex);

    // The tolerance could in principle admit an edge that is only nearly
    // tight; never trade optimality for ordering.
    if lex_total <= base_total {
        Assignment {
            permutation: lex,
            total: lex_total,
        }
    } else {
        Assignment {
            permutation: base,
            total: base_total,
        }
    }
}

/// Maximises `Σ_i c[i, p(i)]`, defined as `solve_min` on the negated matrix.
pub fn solve_max(c: &CostMatrix) -> Assignment {
    let Assignment { permutation, .. } = solve_min(&c.negated());
    let total = c.total(&permutation);
    Assignment { permutation, total }
}

/// Returns `(row_to_col, u, v)` with `c[i][j] - u[i] - v[j] >= 0` everywhere
/// and `= 0` on the matching.
fn shortest_augmenting_paths(m: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = m.rows();
    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let row = m.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[col_owner[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Greedy row-by-row improvement of a perfect matching in `tight` towards the
/// lexicographically smallest one. Row `i` takes the smallest tight column for
/// which the unfixed rows can still be perfectly matched; feasibility is an
/// alternating-path search from the displaced row to `i`'s old column.
fn lexicographic_matching(mut row_to_col: Vec<usize>, tight: &[Vec<usize>]) -> Vec<usize> {
    let n = row_to_col.len();
    let mut col_owner = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_owner[j] = i;
    }
    let mut parent = vec![usize::MAX; n];
    let mut queue = VecDeque::new();

    for i in 0..n {
        let target = row_to_col[i];
        for &j in &tight[i] {
            if j >= target {
                break;
            }
            let k = col_owner[j];
            if k < i {
                continue;
            }
            // BFS over columns reachable from row k through unfixed rows.
            parent.fill(usize::MAX);
            queue.clear();
            queue.push_back(k);
            let mut found = false;
            'search: while let Some(r) = queue.pop_front() {
                for &c in &tight[r] {
                    if c == j || parent[c] != usize::MAX {
                        continue;
                    }
                    let owner = col_owner[c];
                    if owner < i {
                        continue;
                    }
                    parent[c] = r;
                    if c == target {
                        found = true;
                        break 'search;
                    }
                    queue.push_back(owner);
                }
            }
            if !found {
                continue;
            }
            // Shift along the path: each row on it takes the next column.
            let mut c = target;
            loop {
                let r = parent[c];
                let prev = row_to_col[r];
                row_to_col[r] = c;
                col_owner[c] = r;
                if r == k {
                    break;
                }
                c = prev;
            }
            row_to_col[i] = j;
            col_owner[j] = i;
            break;
        }
    }
    row_to_col
}
