use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rebasin::graph::{apply_assignment, build_coupling_graph, residual_perms, GraphOptions, ResidualMode};
use rebasin::plant::contaminated_assignment;
use rebasin::toy::{
    attention_scores, forward, init_random, lmc_curve, loss, loss_and_gradient, train_toy,
    verify_equivalence, EquivalenceOptions, EvalBatch,
};
use rebasin::{ArchSpec, PermutationAssignment};

fn arch(l: usize, h: usize, dm: usize, dh: usize, ln: bool) -> ArchSpec {
    ArchSpec {
        n_blocks: l,
        n_heads: h,
        embed_dim: dm,
        mlp_hidden: dh,
        input_dim: 5,
        output_dim: 4,
        has_layernorm: ln,
    }
}

/// Central differences on every parameter of a 2-block model with LayerNorm.
#[test]
fn analytic_gradient_matches_finite_differences() {
    let a = arch(2, 2, 8, 12, true);
    let ws = init_random(&a, 11).unwrap();
    let batch = EvalBatch::synthetic(6, 4, a.input_dim, a.output_dim, 3);
    let (_, grad) = loss_and_gradient(&ws, &batch).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, t) in ws.tensors() {
        for i in 0..t.data.len() {
            let mut plus = ws.clone();
            plus.tensor_mut(name).unwrap().data[i] += h;
            let mut minus = ws.clone();
            minus.tensor_mut(name).unwrap().data[i] -= h;
            let fd = (loss(&plus, &batch).unwrap() - loss(&minus, &batch).unwrap()) / (2.0 * h);
            let an = grad.get(name).unwrap().data[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{name}[{i}]: analytic {an} vs numeric {fd}");
        }
    }
    assert!(worst.is_finite());
}

#[test]
fn training_lowers_loss_on_separable_task() {
    let a = arch(1, 2, 8, 16, false);
    let ws = init_random(&a, 1).unwrap();
    let batch = EvalBatch::synthetic(32, 4, a.input_dim, a.output_dim, 2);
    let before = loss(&ws, &batch).unwrap();
    let trained = train_toy(&ws, &batch, 200, 0.05).unwrap();
    let after = loss(&trained, &batch).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn compose_mode_permutations_preserve_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (l, ln) in [(1, false), (2, true), (3, false), (3, true)] {
        let a = arch(l, 4, 32, 64, ln);
        let ws = init_random(&a, l as u64).unwrap();
        let g = build_coupling_graph(&a, GraphOptions { pin_input: false, ..Default::default() }).unwrap();
        for seed in 0..4 {
            let pa = PermutationAssignment::random(&g, &mut rng);
            let opts = EquivalenceOptions { n_samples: 4, seq_len: 8, tol: 1e-9, seed };
            let r = verify_equivalence(&ws, &g, &pa, &opts).unwrap();
            assert!(r.pass, "L={l} ln={ln}: deviation {}", r.max_dev);
        }
    }
}

#[test]
fn tie_mode_permutations_preserve_outputs_with_identity_skips() {
    let a = arch(2, 4, 16, 24, true);
    let ws = init_random(&a, 3).unwrap();
    let g = build_coupling_graph(
        &a,
        GraphOptions { residual_mode: ResidualMode::Tie, pin_input: false },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pa = PermutationAssignment::random(&g, &mut rng);
    let opts = EquivalenceOptions { tol: 1e-10, ..Default::default() };
    let r = verify_equivalence(&ws, &g, &pa, &opts).unwrap();
    assert!(r.pass, "deviation {}", r.max_dev);
}

#[test]
fn identity_assignment_gives_zero_deviation() {
    let a = arch(2, 2, 8, 12, true);
    let ws = init_random(&a, 3).unwrap();
    let g = build_coupling_graph(&a, GraphOptions::default()).unwrap();
    let r = verify_equivalence(&ws, &g, &PermutationAssignment::identity(&g), &EquivalenceOptions::default())
        .unwrap();
    assert_eq!(r.max_dev, 0.0);
}

#[test]
fn cross_head_permutation_breaks_equivalence() {
    let a = arch(2, 4, 16, 24, false);
    let g = build_coupling_graph(&a, GraphOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..5 {
        let ws = init_random(&a, seed).unwrap();
        let pa = contaminated_assignment(&g, 0, &mut rng).unwrap();
        let r = verify_equivalence(&ws, &g, &pa, &EquivalenceOptions::default()).unwrap();
        assert!(!r.pass && r.max_dev > 1e-4, "deviation {}", r.max_dev);
    }
}

#[test]
fn permuted_heads_reproduce_source_scores() {
    let a = arch(2, 4, 16, 24, true);
    let ws = init_random(&a, 8).unwrap();
    let g = build_coupling_graph(&a, GraphOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pa = PermutationAssignment::random(&g, &mut rng);
    let permuted = apply_assignment(&ws, &g, &pa).unwrap();
    let skips = residual_perms(&g, &pa).unwrap();
    let batch = EvalBatch::random_inputs(3, 6, a.input_dim, 4);
    let before = attention_scores(&ws, &batch, None).unwrap();
    let after = attention_scores(&permuted, &batch, skips.as_deref()).unwrap();
    for (sb, sa) in before.iter().zip(&after) {
        for (block, (hb, ha)) in sb.iter().zip(sa).enumerate() {
            let bp = match pa.get(&format!("block.{block}.attn")).unwrap() {
                rebasin::VarPerm::Block(b) => b.clone(),
                _ => unreachable!(),
            };
            for i in 0..a.n_heads {
                let src = &hb[bp.inter().get(i)];
                assert!(ha[i].max_abs_diff(src) <= 1e-12);
            }
        }
    }
}

#[test]
fn unpinned_embedding_permutes_the_stream() {
    // With an unpinned embedding the logits are unchanged: the head reads the
    // stream through the last permutation.
    let a = arch(1, 2, 8, 12, false);
    let ws = init_random(&a, 2).unwrap();
    let g = build_coupling_graph(&a, GraphOptions { pin_input: false, ..Default::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pa = PermutationAssignment::random(&g, &mut rng);
    let batch = EvalBatch::random_inputs(2, 3, a.input_dim, 1);
    let skips = residual_perms(&g, &pa).unwrap().unwrap();
    let out = forward(&apply_assignment(&ws, &g, &pa).unwrap(), &batch, Some(&skips)).unwrap();
    let reference = forward(&ws, &batch, None).unwrap();
    assert!(out.max_abs_diff(&reference) < 1e-10);
}

#[test]
fn curve_endpoints_equal_standalone_losses() {
    let a = arch(1, 2, 8, 12, true);
    let left = init_random(&a, 1).unwrap();
    let right = init_random(&a, 2).unwrap();
    let batch = EvalBatch::synthetic(8, 4, a.input_dim, a.output_dim, 3);
    let c = lmc_curve(&left, &right, &batch, 7).unwrap();
    assert_eq!(c.losses[0].to_bits(), loss(&left, &batch).unwrap().to_bits());
    assert_eq!(c.losses[6].to_bits(), loss(&right, &batch).unwrap().to_bits());
    assert!(c.alphas.windows(2).all(|w| w[0] < w[1]));
    assert!(lmc_curve(&left, &init_random(&arch(2, 2, 8, 12, true), 1).unwrap(), &batch, 3).is_err());
}
