use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rebasin::attention::{spectral_head_distance, BlockPermutation};
use rebasin::checkpoint::{read_checkpoint, write_checkpoint};
use rebasin::graph::{apply_assignment, apply_to_task_vector, build_coupling_graph, GraphOptions, ResidualMode};
use rebasin::lap::{solve_max, solve_min, CostMatrix};
use rebasin::linalg::{permute_cols, permute_rows, singular_values, Matrix};
use rebasin::matching::{match_invocations, soblap_objective, weight_match, weight_match_from, MatchOptions};
use rebasin::toy::init_random;
use rebasin::transport::{compute_task_vector, merge_task_vectors, transport, ScalingSpec};
use rebasin::{ArchSpec, PermutationAssignment, Permutation, TaskVector, WeightSet};

fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
                let (s, c) = theta.sin_cos();
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn gram_singular_values(m: &Matrix) -> Vec<f64> {
    let small = if m.rows() <= m.cols() { m.matmul_t(m).unwrap() } else { m.t_matmul(m).unwrap() };
    let rows = (0..small.rows()).map(|i| small.row(i).to_vec()).collect();
    symmetric_eigenvalues(rows).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

fn brute_force(c: &CostMatrix) -> (Vec<usize>, f64) {
    let n = c.n();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        let total: f64 = (0..n).map(|i| c.matrix()[(i, p[i])]).sum();
        if best.as_ref().is_none_or(|(_, b)| total < *b) {
            best = Some((p.clone(), total));
        }
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| p[i] < p[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| p[j] > p[i]).unwrap();
        p.swap(i, j);
        p[i + 1..].reverse();
    }
    best.unwrap()
}

fn arch_strategy() -> impl Strategy<Value = ArchSpec> {
    (1usize..=2, 1usize..=3, 1usize..=3, 2usize..=6, 1usize..=4, 1usize..=3, any::<bool>()).prop_map(
        |(l, h, dk, dh, din, dout, ln)| ArchSpec {
            n_blocks: l,
            n_heads: h,
            embed_dim: h * dk,
            mlp_hidden: dh,
            input_dim: din,
            output_dim: dout,
            has_layernorm: ln,
        },
    )
}

fn f32_weights(arch: &ArchSpec, seed: u64) -> WeightSet {
    init_random(arch, seed).unwrap().map(|_, x| x as f32 as f64)
}

fn mode_strategy() -> impl Strategy<Value = ResidualMode> {
    prop_oneof![Just(ResidualMode::Compose), Just(ResidualMode::Tie)]
}

#[test]
fn singular_values_agree_with_gram_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for rows in 1..=8 {
        for cols in 1..=8 {
            let m = random_matrix(rows, cols, &mut rng);
            let got = singular_values(&m).unwrap();
            let want = gram_singular_values(&m);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-8, "{rows}x{cols}: {got:?} vs {want:?}");
            }
        }
    }
}

#[test]
fn lap_matches_enumeration_including_tie_break() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 2..=7 {
        for trial in 0..100 {
            // Half the instances use small integers so ties are common.
            let m = if trial % 2 == 0 {
                random_matrix(n, n, &mut rng)
            } else {
                Matrix::from_fn(n, n, |_, _| rng.random_range(0..4) as f64)
            };
            let c = CostMatrix::new(m).unwrap();
            let (perm, cost) = brute_force(&c);
            let got = solve_min(&c);
            assert!((got.total - cost).abs() <= 1e-9, "n={n}");
            assert_eq!(got.permutation.as_slice(), &perm[..], "n={n} trial={trial}");
        }
    }
}

#[test]
fn spectral_distance_ignores_row_and_column_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=16));
        let h = random_matrix(r, c, &mut rng);
        let moved = permute_cols(
            &permute_rows(&h, &Permutation::random(r, &mut rng)).unwrap(),
            &Permutation::random(c, &mut rng),
        )
        .unwrap();
        assert!(spectral_head_distance(&h, &moved, 2.0).unwrap() <= 1e-9);
    }
}

#[test]
fn lap_scales_softly_with_size() {
    // Soft check on the cubic solver, best of five runs per size.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let time = |n: usize, rng: &mut ChaCha8Rng| {
        let c = CostMatrix::new(random_matrix(n, n, rng)).unwrap();
        (0..5)
            .map(|_| {
                let start = std::time::Instant::now();
                std::hint::black_box(solve_max(&c));
                start.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    time(64, &mut rng);
    let small = time(128, &mut rng);
    let large = time(256, &mut rng);
    println!("LAP n=128: {small:.4}s, n=256: {large:.4}s, ratio {:.2}", large / small);
    assert!(large / small <= 10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(arch in arch_strategy(), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let ws = f32_weights(&arch, seed);
        write_checkpoint(&ws, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        prop_assert_eq!(back.arch(), ws.arch());
        for (name, t) in ws.tensors() {
            let b = back.get(name).unwrap();
            prop_assert_eq!(&b.shape, &t.shape);
            prop_assert!(b.data.iter().zip(&t.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn application_is_a_bijection(arch in arch_strategy(), mode in mode_strategy(), seed in any::<u64>()) {
        let g = build_coupling_graph(&arch, GraphOptions { residual_mode: mode, pin_input: false }).unwrap();
        let ws = init_random(&arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = PermutationAssignment::random(&g, &mut rng);
        let there = apply_assignment(&ws, &g, &a).unwrap();
        prop_assert_eq!(apply_assignment(&there, &g, &a.inverse()).unwrap(), ws);
    }

    #[test]
    fn application_is_linear(arch in arch_strategy(), seed in any::<u64>(), s in -3.0f64..3.0) {
        let g = build_coupling_graph(&arch, GraphOptions::default()).unwrap();
        let x = init_random(&arch, seed).unwrap();
        let y = init_random(&arch, seed.wrapping_add(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = PermutationAssignment::random(&g, &mut rng);
        let lhs = apply_assignment(&x.scale(s).add(&y).unwrap(), &g, &a).unwrap();
        let rhs = apply_assignment(&x, &g, &a).unwrap().scale(s).add(&apply_assignment(&y, &g, &a).unwrap()).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn block_permutation_inverse_round_trips(h in 1usize..5, dk in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bp = BlockPermutation::random(h, dk, &mut rng);
        let composed = bp.flattened().compose(bp.inverse().flattened()).unwrap();
        prop_assert!(composed.is_identity());
    }

    #[test]
    fn matcher_properties(mode in mode_strategy(), seed in 0u64..1000) {
        let arch = ArchSpec { n_blocks: 2, n_heads: 2, embed_dim: 8, mlp_hidden: 12, input_dim: 4, output_dim: 3, has_layernorm: true };
        let g = build_coupling_graph(&arch, GraphOptions { residual_mode: mode, pin_input: false }).unwrap();
        let a = init_random(&arch, seed).unwrap();
        let b = init_random(&arch, seed + 5000).unwrap();
        let opts = MatchOptions { seed, ..Default::default() };
        let r = weight_match(&a, &b, &g, &opts).unwrap();

        for w in r.trace.windows(2) {
            prop_assert!(w[1].objective >= w[0].objective - 1e-9 * w[0].objective.abs().max(1.0));
        }
        prop_assert!(r.final_objective() >= soblap_objective(&a, &b, &PermutationAssignment::identity(&g), &g).unwrap() - 1e-9);
        prop_assert_eq!(&weight_match(&a, &b, &g, &opts).unwrap(), &r);
        if r.converged {
            let again = weight_match_from(&a, &b, &g, &opts, r.assignment.clone()).unwrap();
            prop_assert_eq!(&again.assignment, &r.assignment);
            prop_assert_eq!(again.sweeps(), 1);
        }
        prop_assert!(weight_match(&a, &a, &g, &opts).unwrap().assignment.is_identity());
    }

    #[test]
    fn objective_is_invariant_under_joint_permutation(seed in 0u64..1000) {
        let arch = ArchSpec { n_blocks: 1, n_heads: 2, embed_dim: 4, mlp_hidden: 6, input_dim: 3, output_dim: 2, has_layernorm: false };
        let g = build_coupling_graph(&arch, GraphOptions { pin_input: false, ..Default::default() }).unwrap();
        let a = init_random(&arch, seed).unwrap();
        let b = init_random(&arch, seed + 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = PermutationAssignment::random(&g, &mut rng);
        let id = PermutationAssignment::identity(&g);
        let before = soblap_objective(&a, &b, &id, &g).unwrap();
        let after = soblap_objective(
            &apply_assignment(&a, &g, &s).unwrap(),
            &apply_assignment(&b, &g, &s).unwrap(),
            &id,
            &g,
        ).unwrap();
        prop_assert!((before - after).abs() <= 1e-12 * before.abs().max(1.0));
    }

    #[test]
    fn transport_algebra(seed in any::<u64>(), alpha in 0.0f64..2.0) {
        let arch = ArchSpec { n_blocks: 2, n_heads: 2, embed_dim: 4, mlp_hidden: 6, input_dim: 3, output_dim: 2, has_layernorm: true };
        let g = build_coupling_graph(&arch, GraphOptions::default()).unwrap();
        let base_a = init_random(&arch, seed).unwrap();
        let ft = init_random(&arch, seed.wrapping_add(1)).unwrap();
        let base_b = init_random(&arch, seed.wrapping_add(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pi = PermutationAssignment::random(&g, &mut rng);
        let tau = compute_task_vector(&ft, &base_a).unwrap();

        let moved = apply_to_task_vector(&tau, &g, &pi).unwrap();
        let diff = apply_assignment(&ft, &g, &pi).unwrap().sub(&apply_assignment(&base_a, &g, &pi).unwrap()).unwrap();
        prop_assert_eq!(moved.deltas(), &diff);

        let got = transport(&base_b, &tau, &pi, &g, &ScalingSpec::Scalar(alpha)).unwrap();
        let want = base_b.zip_with(moved.deltas(), |b, d| b + alpha * d).unwrap();
        prop_assert_eq!(got, want);

        let other = TaskVector::from_deltas(init_random(&arch, seed.wrapping_add(3)).unwrap());
        let merged = merge_task_vectors(&[tau.clone(), other.clone()], &[0.5, 2.0]).unwrap();
        let lhs = apply_to_task_vector(&merged, &g, &pi).unwrap();
        let rhs = merge_task_vectors(
            &[apply_to_task_vector(&tau, &g, &pi).unwrap(), apply_to_task_vector(&other, &g, &pi).unwrap()],
            &[0.5, 2.0],
        ).unwrap();
        prop_assert_eq!(lhs, rhs);
    }
}

#[test]
fn transport_never_runs_the_matcher() {
    let arch = ArchSpec { n_blocks: 1, n_heads: 2, embed_dim: 4, mlp_hidden: 6, input_dim: 3, output_dim: 2, has_layernorm: false };
    let g = build_coupling_graph(&arch, GraphOptions::default()).unwrap();
    let a = init_random(&arch, 1).unwrap();
    let b = init_random(&arch, 2).unwrap();
    let pi = weight_match(&a, &b, &g, &MatchOptions::default()).unwrap().assignment;
    let count = match_invocations();
    for s in 3..6 {
        let tau = compute_task_vector(&init_random(&arch, s).unwrap(), &a).unwrap();
        transport(&b, &tau, &pi, &g, &ScalingSpec::default()).unwrap();
    }
    assert_eq!(match_invocations(), count);
}
