//! Symmetry and normalization properties of the network layers.

mod common;

use pcqa_core::autodiff::{Graph, Var};
use pcqa_core::layers::{
    attention, feature_embedding, graph_norm, multi_head_cross_attention,
    multi_head_self_attention, patch_aggregation, point_aggregation, AttentionParams,
    EmbeddingParams, GraphNormParams, MapLeaves,
};
use pcqa_core::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn attention_params(rng: &mut ChaCha8Rng, width: usize, heads: usize) -> AttentionParams {
    AttentionParams {
        w_q: random(rng, width, width, 1.0),
        w_k: random(rng, width, width, 1.0),
        w_v: random(rng, width, width, 1.0),
        w_o: random(rng, width, width, 1.0),
        heads,
    }
}

fn norm_params(rng: &mut ChaCha8Rng, width: usize) -> GraphNormParams {
    GraphNormParams {
        alpha: random(rng, 1, width, 1.5),
        gamma: random(rng, 1, width, 2.0),
        beta: random(rng, 1, width, 1.0),
        eps: 1e-5,
    }
}

fn bind<P: MapLeaves<Tensor>>(g: &mut Graph, p: &P) -> P::Output<Var> {
    p.map_leaves("p", &mut |_, t| g.constant(t.clone()))
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = order.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows)
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Evaluates a one-input layer on a fresh graph.
fn eval1(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let out = f(&mut g, x);
    g.value(out).clone()
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (2usize..12, 1usize..4, 1usize..4, any::<u64>()).prop_map(|(n, heads, d, seed)| (n, heads, heads * d, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_attention_is_row_equivariant((n, heads, width, seed) in shape()) {
        let mut rng = common::rng(seed);
        let p = attention_params(&mut rng, width, heads);
        let x = random(&mut rng, n, width, 2.0);
        let order = shuffled(&mut rng, n);
        let f = |g: &mut Graph, x: Var| {
            let p = bind(g, &p);
            multi_head_self_attention(g, x, &p).unwrap()
        };
        let lhs = eval1(&permute_rows(&x, &order), f);
        let rhs = permute_rows(&eval1(&x, f), &order);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn cross_attention_follows_queries_and_ignores_context_order((n, heads, width, seed) in shape()) {
        let mut rng = common::rng(seed);
        let p = attention_params(&mut rng, width, heads);
        let q = random(&mut rng, n, width, 2.0);
        let kv = random(&mut rng, n, width, 2.0);
        let run = |q: &Tensor, kv: &Tensor| {
            let mut g = Graph::new();
            let (q, kv) = (g.constant(q.clone()), g.constant(kv.clone()));
            let p = bind(&mut g, &p);
            let out = multi_head_cross_attention(&mut g, q, kv, &p).unwrap();
            g.value(out).clone()
        };
        let base = run(&q, &kv);
        let qo = shuffled(&mut rng, n);
        let ko = shuffled(&mut rng, n);
        prop_assert!(run(&permute_rows(&q, &qo), &kv).max_abs_diff(&permute_rows(&base, &qo)) < 1e-9);
        prop_assert!(run(&q, &permute_rows(&kv, &ko)).max_abs_diff(&base) < 1e-9);
    }

    #[test]
    fn pointwise_layers_are_row_equivariant((n, _heads, width, seed) in shape()) {
        let mut rng = common::rng(seed);
        let embed = EmbeddingParams {
            w1: random(&mut rng, 3, width, 1.0),
            b1: random(&mut rng, 1, width, 0.5),
            w2: random(&mut rng, width, width, 1.0),
            b2: random(&mut rng, 1, width, 0.5),
        };
        let norm = norm_params(&mut rng, width);
        let x = random(&mut rng, n, 3, 2.0);
        let order = shuffled(&mut rng, n);
        let f = |g: &mut Graph, x: Var| {
            let e = bind(g, &embed);
            let h = feature_embedding(g, x, &e).unwrap();
            let gn = bind(g, &norm);
            graph_norm(g, h, &gn).unwrap()
        };
        let lhs = eval1(&permute_rows(&x, &order), f);
        let rhs = permute_rows(&eval1(&x, f), &order);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn aggregations_are_row_invariant((n, heads, width, seed) in shape()) {
        let mut rng = common::rng(seed);
        let p = attention_params(&mut rng, width, heads);
        let x = random(&mut rng, n, width, 2.0);
        let order = shuffled(&mut rng, n);
        let pool = |g: &mut Graph, x: Var| point_aggregation(g, x).unwrap();
        prop_assert!(eval1(&permute_rows(&x, &order), pool).max_abs_diff(&eval1(&x, pool)) < 1e-9);
        let patches = |g: &mut Graph, x: Var| {
            let p = bind(g, &p);
            patch_aggregation(g, x, &p).unwrap()
        };
        prop_assert!(eval1(&permute_rows(&x, &order), patches).max_abs_diff(&eval1(&x, patches)) < 1e-9);
    }

    #[test]
    fn attention_rows_are_stochastic((n, heads, width, seed) in shape(), m in 1usize..10) {
        let mut rng = common::rng(seed);
        let p = attention_params(&mut rng, width, heads);
        let q = random(&mut rng, n, width, 3.0);
        let kv = random(&mut rng, m, width, 3.0);
        let mut g = Graph::new();
        let (q, kv) = (g.constant(q), g.constant(kv));
        let pv = bind(&mut g, &p);
        let out = attention(&mut g, q, kv, &pv).unwrap();
        prop_assert_eq!(out.weights.len(), heads);
        for a in out.weights {
            let a = g.value(a);
            prop_assert_eq!(a.shape(), &[n, m][..]);
            for r in 0..n {
                let s: f64 = a.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(a.row(r).iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn graph_norm_statistics_with_unit_affine(n in 2usize..40, width in 1usize..6, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = Tensor::from_vec(
            n,
            width,
            (0..n * width).map(|i| rng.gen_range(-3.0..3.0) * (1.0 + (i % width) as f64) + 5.0).collect(),
        );
        let eps = 1e-5;
        let p = GraphNormParams {
            alpha: Tensor::ones(1, width),
            gamma: Tensor::ones(1, width),
            beta: Tensor::zeros(1, width),
            eps,
        };
        let out = eval1(&x, |g, x| {
            let p = bind(g, &p);
            graph_norm(g, x, &p).unwrap()
        });
        for c in 0..width {
            let col: Vec<f64> = (0..n).map(|r| x.get(r, c)).collect();
            let mu = col.iter().sum::<f64>() / n as f64;
            let var_in = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
            let o: Vec<f64> = (0..n).map(|r| out.get(r, c)).collect();
            let mo = o.iter().sum::<f64>() / n as f64;
            let vo = o.iter().map(|v| (v - mo).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mo.abs() < 1e-12, "mean {mo}");
            prop_assert!((vo - var_in / (var_in + eps)).abs() < 1e-9, "var {vo} vs {}", var_in / (var_in + eps));
        }
    }
}

#[test]
fn graph_norm_unit_column_example() {
    let p = GraphNormParams {
        alpha: Tensor::ones(1, 1),
        gamma: Tensor::ones(1, 1),
        beta: Tensor::zeros(1, 1),
        eps: 1e-5,
    };
    let out = eval1(&Tensor::from_rows(&[[1.0], [-1.0]]), |g, x| {
        let p = bind(g, &p);
        graph_norm(g, x, &p).unwrap()
    });
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out.get(0, 0) - expected).abs() < 1e-15);
    assert!((out.get(1, 0) + expected).abs() < 1e-15);
    assert!((out.get(0, 0) - 0.999995).abs() < 1e-6);
}
