use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapnet_core::graph_io::Graph;
use tapnet_core::model::{build_tapnet, PoolingKind, TapNetConfig};
use tapnet_core::{Tape, Tensor};

fn random_graph(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.3) {
                edges.push((i, j));
            }
        }
    }
    let mut f = Tensor::zeros(n, dim);
    for i in 0..n {
        f.set(i, rng.gen_range(0..dim), 1.0);
    }
    Graph::from_edges(n, &edges, 0).unwrap().with_features(f)
}

fn permuted(g: &Graph, perm: &[usize]) -> Graph {
    // node i moves to position perm[i]
    let n = g.num_nodes();
    let edges: Vec<_> = g.edges().into_iter().map(|(a, b)| (perm[a], perm[b])).collect();
    let mut f = Tensor::zeros(n, g.features.cols());
    for i in 0..n {
        f.row_mut(perm[i]).copy_from_slice(g.features.row(i));
    }
    Graph::from_edges(n, &edges, g.label).unwrap().with_features(f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stage_cascade_law(
        n in 1usize..40,
        r1 in 0.05f64..=1.0,
        r2 in 0.05f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = TapNetConfig { rates: vec![r1, r2], hidden_dim: 8, mlp_hidden: 8, ..TapNetConfig::default() };
        let model = build_tapnet(&cfg, 3, 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 3);
        let mut tape = Tape::new(model.params());
        let out = model.forward(&mut tape, &g, None).unwrap();
        let sizes = out.stage_sizes();
        let mut expect = vec![n];
        for r in [r1, r2] {
            let prev = *expect.last().unwrap() as f64;
            expect.push(((r * prev - 1e-9 * (r * prev).max(1.0)).ceil() as usize).max(1));
        }
        prop_assert_eq!(sizes, expect);
        prop_assert_eq!(tape.shape(out.logits), (1, 2));
        prop_assert!(tape.value(out.logits).is_finite());
    }
}

#[test]
fn eval_forward_is_pure() {
    let model = build_tapnet(&TapNetConfig::default(), 4, 3, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = random_graph(&mut rng, 12, 4);
    let a = model.evaluate(&g).unwrap();
    let b = model.evaluate(&g).unwrap();
    assert_eq!(a, b);
}

#[test]
fn logits_invariant_under_node_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    for kind in [PoolingKind::Tap, PoolingKind::TapNoLv, PoolingKind::TopkBaseline, PoolingKind::None] {
        let cfg = TapNetConfig {
            pooling: kind,
            ..TapNetConfig::default()
        };
        let model = build_tapnet(&cfg, 5, 2, 9).unwrap();
        for _ in 0..10 {
            let n = rng.gen_range(2..20);
            let g = random_graph(&mut rng, n, 5);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = model.evaluate(&g).unwrap();
            let distinct = a.scores.iter().all(|s| {
                let mut v = s.clone();
                v.sort_by(f64::total_cmp);
                v.windows(2).all(|w| w[1] - w[0] > 1e-9)
            });
            if !distinct {
                continue;
            }
            let b = model.evaluate(&permuted(&g, &perm)).unwrap();
            assert!(a.logits.max_abs_diff(&b.logits) < 1e-8);
            checked += 1;
        }
    }
    assert!(checked >= 20);
}

#[test]
fn readout_width_independent_of_size() {
    let model = build_tapnet(&TapNetConfig::default(), 3, 2, 0).unwrap();
    assert_eq!(model.config().readout_width(), 576);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 2, 7, 30] {
        let g = random_graph(&mut rng, n, 3);
        let mut tape = Tape::new(model.params());
        let out = model.forward(&mut tape, &g, None).unwrap();
        assert_eq!(tape.shape(out.logits), (1, 2));
    }
}

#[test]
fn training_mode_uses_dropout() {
    let model = build_tapnet(&TapNetConfig::default(), 3, 2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 9, 3);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(1);
    let mut t1 = Tape::new(model.params());
    let o1 = model.forward(&mut t1, &g, Some(&mut drop_rng)).unwrap();
    let mut t2 = Tape::new(model.params());
    let o2 = model.forward(&mut t2, &g, None).unwrap();
    assert_ne!(t1.value(o1.logits), t2.value(o2.logits));
}
