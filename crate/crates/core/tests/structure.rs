mod common;

use std::collections::BTreeSet;

use common::{numeric_jacobian, random_dag};
use grflow::flow::{FlowConfig, ResidualFlow};
use grflow::graph::{arithmetic_circuit_graph, parse_graph, tree_graph, DagGraph};
use grflow::masks::{assign_labels, build_masks, reachability};
use grflow::tensor::Tensor2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Moral graph computed directly from the parent lists.
fn moral_pairs(g: &DagGraph) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    let mut add = |a: usize, b: usize| {
        s.insert((a.min(b), a.max(b)));
    };
    for v in 0..g.len() {
        let ps = g.parents(v);
        for &p in ps {
            add(p, v);
        }
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                add(ps[i], ps[j]);
            }
        }
    }
    s
}

fn with_latents(g: &DagGraph, mask: u32) -> DagGraph {
    let latent: Vec<&str> = (0..g.len())
        .filter(|i| mask >> i & 1 == 1)
        .map(|i| g.name(i))
        .collect();
    let edges: Vec<(&str, &str)> = g.edges().iter().map(|&(u, v)| (g.name(u), g.name(v))).collect();
    let nodes: Vec<&str> = g.nodes().iter().map(String::as_str).collect();
    DagGraph::new(&nodes, &edges, &latent).unwrap()
}

#[test]
fn builtin_graphs_round_trip_through_text() {
    for g in [arithmetic_circuit_graph(true), tree_graph(false)] {
        assert_eq!(parse_graph(&g.render()).unwrap(), g);
    }
    assert_eq!(arithmetic_circuit_graph(true).edges().len(), 8);
    assert_eq!(tree_graph(true).len(), 7);
}

#[test]
fn arithmetic_inversion_keeps_moral_links_of_z5() {
    let g = arithmetic_circuit_graph(true);
    let inv = g.invert_for_inference().unwrap();
    let z5 = inv.graph.index_of("z5").unwrap();
    let ps: BTreeSet<&str> = inv.graph.parents(z5).iter().map(|&p| inv.graph.name(p)).collect();
    let children: BTreeSet<&str> = inv.graph.children(z5).iter().map(|&c| inv.graph.name(c)).collect();
    let linked: BTreeSet<&str> = ps.union(&children).copied().collect();
    assert!(linked.is_superset(&BTreeSet::from(["z3", "z4"])));
    assert_eq!(inv.conditioning, vec!["x0", "x1"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topo_order_respects_every_edge(d in 1usize..10, p in 0.0f64..0.9, seed in any::<u64>()) {
        let g = random_dag(d, p, seed);
        let order = g.topo_sort();
        prop_assert!(order.respects(&g));
        prop_assert_eq!(order, g.topo_sort());
    }

    #[test]
    fn render_parse_is_identity(d in 1usize..10, p in 0.0f64..0.9, seed in any::<u64>(), mask in any::<u32>()) {
        let g = with_latents(&random_dag(d, p, seed), mask);
        prop_assert_eq!(parse_graph(&g.render()).unwrap(), g);
    }

    #[test]
    fn inversion_is_acyclic_upper_bound(d in 1usize..9, p in 0.0f64..0.9, seed in any::<u64>(), mask in 1u32..512) {
        let g = with_latents(&random_dag(d, p, seed), mask);
        prop_assume!(!g.latent_indices().is_empty());
        let inv = g.invert_for_inference().unwrap();
        prop_assert!(inv.graph.topo_sort().respects(&inv.graph));
        prop_assert_eq!(&inv.latent_index, &g.latent_indices());
        prop_assert_eq!(&inv.observed_index, &g.observed_indices());
        // every moral link between latents survives, in some direction
        let local = |full: usize| inv.latent_index.iter().position(|&l| l == full);
        let inv_pairs: BTreeSet<(usize, usize)> = inv.graph.edges().iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        for (a, b) in moral_pairs(&g) {
            if let (Some(la), Some(lb)) = (local(a), local(b)) {
                prop_assert!(inv_pairs.contains(&(la.min(lb), la.max(lb))));
            }
        }
    }

    #[test]
    fn mask_reachability_matches_self_and_parents(d in 1usize..8, p in 0.0f64..0.9, seed in any::<u64>(), extra in 0usize..6) {
        let g = random_dag(d, p, seed);
        let labels = assign_labels(&g, &[d + extra, d + extra], seed).unwrap();
        let masks = build_masks(&g, labels);
        let r = reachability(&masks);
        for i in 0..d {
            for j in 0..d {
                let allowed = i == j || g.parents(i).contains(&j);
                prop_assert_eq!(r[i][j], allowed, "output {} input {}", i, j);
            }
        }
    }

    #[test]
    fn block_jacobian_vanishes_outside_family(d in 1usize..7, p in 0.0f64..0.9, seed in any::<u64>()) {
        let g = random_dag(d, p, seed);
        let f = common::random_flow(g.clone(), vec![], 2, 3 * d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        for b in &f.effective().blocks {
            let map = |v: &[f64]| b.forward(&Tensor2::row_vector(v), None).unwrap().y.into_vec();
            let j = numeric_jacobian(map, &x, 1e-5);
            let analytic = b.jacobian(&x, None).unwrap();
            for r in 0..d {
                for c in 0..d {
                    if r != c && !g.parents(r).contains(&c) {
                        prop_assert!(j[(r, c)].abs() < 1e-8);
                        prop_assert_eq!(analytic.get(r, c), 0.0);
                    }
                    prop_assert!((j[(r, c)] - analytic.get(r, c)).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn mask_sparsity_is_below_dense_count() {
    let g = arithmetic_circuit_graph(false);
    let f = ResidualFlow::new(g.clone(), vec![], &FlowConfig::new(1, 40, 3)).unwrap();
    let labels = assign_labels(&g, &[40], f.blocks()[0].mask_seed()).unwrap();
    let masks = build_masks(&g, labels);
    let dense = 8 * 40 + 40 * 8;
    assert!(masks.ones() < dense);
    assert_eq!(f.parameter_count(), masks.ones() + 40 + 8 + 1);
}
