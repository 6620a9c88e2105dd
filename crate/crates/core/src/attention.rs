//! Structured permutations of multi-head attention and head alignment.
//!
//! Projection weights are stored `(out, in)`, so a head is a contiguous block
//! of `d_k` rows. Head matching is two-staged: whole heads are paired by the
//! distance between their singular-value spectra (blind to any row or column
//! order inside a head), then units are paired inside each matched head by a
//! linear assignment on row dot products.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lap::{solve_max, solve_min, CostMatrix};
use crate::linalg::{dot, permute_cols, permute_rows, singular_values, vector_pnorm, Matrix};
use crate::permutation::Permutation;

/// An inter-head permutation composed with one intra-head permutation per
/// destination head.
///
/// Unit `r` of destination head `i` is taken from unit `intra[i](r)` of source
/// head `inter(i)`, so `flattened(i·d_k + r) = inter(i)·d_k + intra[i](r)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPermutation {
    inter: Permutation,
    intra: Vec<Permutation>,
    flattened: Permutation,
}

impl BlockPermutation {
    pub fn new(inter: Permutation, intra: Vec<Permutation>) -> Result<Self> {
        if intra.len() != inter.len() {
            return Err(Error::LengthMismatch {
                expected: inter.len(),
                actual: intra.len(),
            });
        }
        let head_dim = intra.first().map_or(0, Permutation::len);
        if head_dim == 0 {
            return Err(Error::InvalidArgument("empty head permutation".into()));
        }
        if let Some(p) = intra.iter().find(|p| p.len() != head_dim) {
            return Err(Error::LengthMismatch {
                expected: head_dim,
                actual: p.len(),
            });
        }
        let mut flat = Vec::with_capacity(inter.len() * head_dim);
        for (i, p) in intra.iter().enumerate() {
            let src = inter.get(i) * head_dim;
            flat.extend(p.as_slice().iter().map(|&r| src + r));
        }
        let flattened = Permutation::from_vec(flat)?;
        Ok(BlockPermutation {
            inter,
            intra,
            flattened,
        })
    }

    pub fn identity(heads: usize, head_dim: usize) -> Self {
        BlockPermutation::new(
            Permutation::identity(heads),
            vec![Permutation::identity(head_dim); heads],
        )
        .expect("identity block permutation is valid")
    }

    pub fn random<R: Rng + ?Sized>(heads: usize, head_dim: usize, rng: &mut R) -> Self {
        let inter = Permutation::random(heads, rng);
        let intra = (0..heads)
            .map(|_| Permutation::random(head_dim, rng))
            .collect();
        BlockPermutation::new(inter, intra).expect("random block permutation is valid")
    }

    pub fn inter(&self) -> &Permutation {
        &self.inter
    }

    pub fn intra(&self) -> &[Permutation] {
        &self.intra
    }

    pub fn flattened(&self) -> &Permutation {
        &self.flattened
    }

    pub fn heads(&self) -> usize {
        self.inter.len()
    }

    pub fn head_dim(&self) -> usize {
        self.intra[0].len()
    }

    pub fn inverse(&self) -> Self {
        let inter_inv = self.inter.inverse();
        let intra = (0..self.heads())
            .map(|j| self.intra[inter_inv.get(j)].inverse())
            .collect();
        BlockPermutation::new(inter_inv, intra).expect("inverse of a block permutation")
    }
}

/// Rows `[i·d_k, (i+1)·d_k)` of `w` for every head `i`.
pub fn split_heads(w: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    if heads == 0 || w.rows() % heads != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} rows cannot be split into {heads} heads",
            w.rows()
        )));
    }
    let dk = w.rows() / heads;
    Ok((0..heads).map(|i| w.row_block(i * dk, (i + 1) * dk)).collect())
}

/// `‖σ(a) − σ(b)‖_p` between descending singular-value vectors.
pub fn spectral_head_distance(a: &Matrix, b: &Matrix, p: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "head shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    vector_pnorm(&singular_values(a)?, &singular_values(b)?, p)
}

/// The q, k and v projections of one attention block, split per head.
#[derive(Clone, Debug)]
pub struct HeadView {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl HeadView {
    pub fn new(wq: &Matrix, wk: &Matrix, wv: &Matrix, heads: usize) -> Result<Self> {
        if wq.shape() != wk.shape() || wq.shape() != wv.shape() {
            return Err(Error::DimensionMismatch(
                "q, k and v projections differ in shape".into(),
            ));
        }
        Ok(HeadView {
            q: split_heads(wq, heads)?,
            k: split_heads(wk, heads)?,
            v: split_heads(wv, heads)?,
        })
    }

    pub fn heads(&self) -> usize {
        self.q.len()
    }

    fn projections(&self) -> [&[Matrix]; 3] {
        [&self.q, &self.k, &self.v]
    }

    fn spectra(&self) -> Result<[Vec<Vec<f64>>; 3]> {
        let spectra = |hs: &[Matrix]| hs.iter().map(singular_values).collect::<Result<Vec<_>>>();
        Ok([spectra(&self.q)?, spectra(&self.k)?, spectra(&self.v)?])
    }
}

/// `D[i][j] = d(q_i^B, q_j^A) + d(k_i^B, k_j^A) + d(v_i^B, v_j^A)`.
pub fn inter_head_distance_matrix(b: &HeadView, a: &HeadView, p: f64) -> Result<CostMatrix> {
    let h = b.heads();
    if a.heads() != h || a.q[0].shape() != b.q[0].shape() {
        return Err(Error::DimensionMismatch(
            "head views disagree in head count or head shape".into(),
        ));
    }
    let (sb, sa) = (b.spectra()?, a.spectra()?);
    let mut d = Matrix::zeros(h, h);
    for i in 0..h {
        for j in 0..h {
            let mut total = 0.0;
            for proj in 0..3 {
                total += vector_pnorm(&sb[proj][i], &sa[proj][j], p)?;
            }
            d[(i, j)] = total;
        }
    }
    CostMatrix::new(d)
}

/// Extra intra-head value term coupling the output projection: columns of
/// `W_0` are permuted by the attention permutation, so matched head pairs
/// contribute `Σ_o B0[o, i·d_k + r]·Ã0[o, j·d_k + s]`.
#[derive(Clone, Debug)]
pub struct OutputCoupling {
    /// `W_0` of model B.
    pub out_b: Matrix,
    /// `W_0` of model A with its row permutation already applied.
    pub out_a: Matrix,
}

/// Options for [`align_heads`].
#[derive(Clone, Debug)]
pub struct AlignOptions {
    pub p_norm: f64,
    pub output_coupling: Option<OutputCoupling>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            p_norm: 2.0,
            output_coupling: None,
        }
    }
}

/// Two-stage head alignment of A onto B.
///
/// `a` must already have the incoming stream permutation folded into its
/// columns. Stage one solves a min-cost assignment on the spectral distance
/// matrix; stage two solves, per matched pair, a max-value assignment on the
/// summed q/k/v row dot products.
pub fn align_heads(a: &HeadView, b: &HeadView, opts: &AlignOptions) -> Result<BlockPermutation> {
    let d = inter_head_distance_matrix(b, a, opts.p_norm)?;
    let inter = solve_min(&d).permutation;
    let h = b.heads();
    let dk = b.q[0].rows();

    let coupling = match &opts.output_coupling {
        Some(c) => {
            if c.out_b.cols() != h * dk || c.out_a.shape() != c.out_b.shape() {
                return Err(Error::DimensionMismatch(
                    "output projection does not match attention width".into(),
                ));
            }
            Some(c.out_b.t_matmul(&c.out_a)?)
        }
        None => None,
    };

    let mut intra = Vec::with_capacity(h);
    for i in 0..h {
        let j = inter.get(i);
        let mut value = Matrix::zeros(dk, dk);
        for (hb, ha) in b.projections().into_iter().zip(a.projections()) {
            value.add_assign(&hb[i].matmul_t(&ha[j])?);
        }
        if let Some(cols) = &coupling {
            for r in 0..dk {
                for s in 0..dk {
                    value[(r, s)] += cols[(i * dk + r, j * dk + s)];
                }
            }
        }
        intra.push(solve_max(&CostMatrix::new(value)?).permutation);
    }
    BlockPermutation::new(inter, intra)
}

/// Result of [`verify_attention_equivariance`].
#[derive(Clone, Debug)]
pub struct EquivarianceReport {
    /// `max |O' − O·P_attn|`, with `O·P_attn` realised as a column gather.
    pub max_output_deviation: f64,
    /// `max_i max |A'_i − A_{inter(i)}|` over per-head score matrices; `None`
    /// when the permutation is not head-structured.
    pub max_score_deviation: Option<f64>,
    pub pass: bool,
}

/// Per-head softmax scores `softmax(Q_h K_hᵀ / √d_k)` and the concatenated
/// output `[A_h V_h]_h` for `S × d_m` input `x`.
pub fn multi_head_attention(
    x: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    heads: usize,
) -> Result<(Vec<Matrix>, Matrix)> {
    let q = x.matmul_t(wq)?;
    let k = x.matmul_t(wk)?;
    let v = x.matmul_t(wv)?;
    let dm = wq.rows();
    if dm % heads != 0 {
        return Err(Error::DimensionMismatch(format!(
            "width {dm} not divisible by {heads} heads"
        )));
    }
    let dk = dm / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let s = x.rows();
    let mut out = Matrix::zeros(s, dm);
    let mut scores = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = (
            q.col_block(h * dk, (h + 1) * dk),
            k.col_block(h * dk, (h + 1) * dk),
            v.col_block(h * dk, (h + 1) * dk),
        );
        let mut a = qh.matmul_t(&kh)?.scale(scale);
        softmax_rows(&mut a);
        let o = a.matmul(&vh)?;
        for t in 0..s {
            out.row_mut(t)[h * dk..(h + 1) * dk].copy_from_slice(o.row(t));
        }
        scores.push(a);
    }
    Ok((scores, out))
}

pub(crate) fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Checks that permuting the q/k/v output units by `perm` permutes the
/// attention output the same way.
///
/// `perm` may be any d_m permutation; `heads_of` supplies the head structure
/// when it is a [`BlockPermutation`], enabling the per-head score check.
pub fn verify_attention_equivariance(
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    heads: usize,
    perm: &Permutation,
    block: Option<&BlockPermutation>,
    x: &Matrix,
    tol: f64,
) -> Result<EquivarianceReport> {
    let (scores, out) = multi_head_attention(x, wq, wk, wv, heads)?;
    let wq2 = permute_rows(wq, perm)?;
    let wk2 = permute_rows(wk, perm)?;
    let wv2 = permute_rows(wv, perm)?;
    let (scores2, out2) = multi_head_attention(x, &wq2, &wk2, &wv2, heads)?;
    let expected = permute_cols(&out, perm)?;
    let max_output_deviation = out2.max_abs_diff(&expected);
    let max_score_deviation = block.map(|bp| {
        (0..heads)
            .map(|i| scores2[i].max_abs_diff(&scores[bp.inter().get(i)]))
            .fold(0.0, f64::max)
    });
    let pass = max_output_deviation <= tol && max_score_deviation.map_or(true, |d| d <= tol);
    Ok(EquivarianceReport {
        max_output_deviation,
        max_score_deviation,
        pass,
    })
}

/// Sum over q, k, v of `⟨h_i^B, P h_j^A⟩` at the given block permutation.
pub fn block_alignment_value(a: &HeadView, b: &HeadView, bp: &BlockPermutation) -> f64 {
    let mut total = 0.0;
    for (hb, ha) in b.projections().into_iter().zip(a.projections()) {
        for i in 0..bp.heads() {
            let j = bp.inter().get(i);
            for r in 0..bp.head_dim() {
                total += dot(hb[i].row(r), ha[j].row(bp.intra()[i].get(r)));
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Dense `Σ_i E^{i,inter(i)} ⊗ P_intra^(i)` built with an explicit
    /// Kronecker product; returns the column index of the one in each row.
    fn kron_reconstruction(bp: &BlockPermutation) -> Vec<usize> {
        let (h, dk) = (bp.heads(), bp.head_dim());
        let n = h * dk;
        let mut dense = vec![0u8; n * n];
        for i in 0..h {
            let mut e = vec![0u8; h * h];
            e[i * h + bp.inter().get(i)] = 1;
            let mut p = vec![0u8; dk * dk];
            for r in 0..dk {
                p[r * dk + bp.intra()[i].get(r)] = 1;
            }
            for (a, b) in (0..h).flat_map(|a| (0..h).map(move |b| (a, b))) {
                for (c, d) in (0..dk).flat_map(|c| (0..dk).map(move |d| (c, d))) {
                    dense[(a * dk + c) * n + b * dk + d] += e[a * h + b] * p[c * dk + d];
                }
            }
        }
        (0..n)
            .map(|row| {
                let ones: Vec<usize> = (0..n).filter(|&c| dense[row * n + c] == 1).collect();
                assert_eq!(ones.len(), 1);
                ones[0]
            })
            .collect()
    }

    #[test]
    fn flattened_matches_dense_kronecker_sum_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for h in 1..=4 {
            for dk in 1..=4 {
                for _ in 0..10 {
                    let bp = BlockPermutation::random(h, dk, &mut rng);
                    assert_eq!(bp.flattened().as_slice(), kron_reconstruction(&bp).as_slice());
                }
            }
        }
    }

    #[test]
    fn flattened_hand_example() {
        let bp = BlockPermutation::new(
            Permutation::from_vec(vec![1, 0]).unwrap(),
            vec![Permutation::identity(2); 2],
        )
        .unwrap();
        assert_eq!(bp.flattened().as_slice(), &[2, 3, 0, 1]);
    }

    #[test]
    fn block_inverse_is_flat_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let bp = BlockPermutation::random(3, 4, &mut rng);
            assert_eq!(bp.inverse().flattened(), &bp.flattened().inverse());
        }
    }

    #[test]
    fn split_heads_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(4, 4, &mut rng);
        assert_eq!(split_heads(&w, 1).unwrap(), vec![w.clone()]);
        let rows = split_heads(&w, 4).unwrap();
        assert!(rows.iter().enumerate().all(|(i, r)| r.row(0) == w.row(i)));
        let two = split_heads(&w, 2).unwrap();
        assert_eq!(two[0], w.row_block(0, 2));
        assert!(split_heads(&w, 3).is_err());
    }

    #[test]
    fn spectral_distance_examples() {
        let a = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let d = spectral_head_distance(&a, &b, 2.0).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(spectral_head_distance(&a, &a, 2.0).unwrap(), 0.0);
        assert!(spectral_head_distance(&a, &Matrix::zeros(3, 2), 2.0).is_err());
    }

    #[test]
    fn distance_matrix_recovers_cyclic_head_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (h, dk, dm) = (4, 3, 12);
        let w: Vec<Matrix> = (0..3).map(|_| random_matrix(dm, dm, &mut rng)).collect();
        let a = HeadView::new(&w[0], &w[1], &w[2], h).unwrap();
        let d = inter_head_distance_matrix(&a, &a, 2.0).unwrap();
        for i in 0..h {
            assert_eq!(d.matrix()[(i, i)], 0.0);
        }
        assert!(solve_min(&d).permutation.is_identity());

        let shift = Permutation::from_vec((0..h).map(|i| (i + 1) % h).collect()).unwrap();
        let bp = BlockPermutation::new(shift.clone(), vec![Permutation::identity(dk); h]).unwrap();
        let wb: Vec<Matrix> = w
            .iter()
            .map(|m| permute_rows(m, bp.flattened()).unwrap())
            .collect();
        let b = HeadView::new(&wb[0], &wb[1], &wb[2], h).unwrap();
        let d = inter_head_distance_matrix(&b, &a, 2.0).unwrap();
        assert_eq!(solve_min(&d).permutation, shift);
    }

    #[test]
    fn align_heads_identity_and_plant() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (h, dk) = (4, 4);
        let dm = h * dk;
        let w: Vec<Matrix> = (0..3).map(|_| random_matrix(dm, dm, &mut rng)).collect();
        let a = HeadView::new(&w[0], &w[1], &w[2], h).unwrap();
        let same = align_heads(&a, &a, &AlignOptions::default()).unwrap();
        assert_eq!(same, BlockPermutation::identity(h, dk));

        for _ in 0..10 {
            let plant = BlockPermutation::random(h, dk, &mut rng);
            let wb: Vec<Matrix> = w
                .iter()
                .map(|m| permute_rows(m, plant.flattened()).unwrap())
                .collect();
            let b = HeadView::new(&wb[0], &wb[1], &wb[2], h).unwrap();
            assert_eq!(align_heads(&a, &b, &AlignOptions::default()).unwrap(), plant);
        }
    }

    #[test]
    fn equivariance_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<Matrix> = (0..3).map(|_| random_matrix(8, 8, &mut rng)).collect();
        let x = random_matrix(5, 8, &mut rng);
        let bp = BlockPermutation::identity(2, 4);
        let r = verify_attention_equivariance(
            &w[0], &w[1], &w[2], 2, bp.flattened(), Some(&bp), &x, 1e-10,
        )
        .unwrap();
        assert_eq!(r.max_output_deviation, 0.0);
        assert_eq!(r.max_score_deviation, Some(0.0));
    }
}
