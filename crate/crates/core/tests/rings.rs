mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ringformer::graph::{BuildOptions, GraphBuilder, HinGraph, NodeId};
use ringformer::rings::{bfs_rings, pool_tokens, precompute_all, CacheScope, RingPartition};

fn sorted_names(g: &HinGraph, ids: &[NodeId]) -> Vec<String> {
    let mut v: Vec<String> = ids.iter().map(|&i| g.node_name(i).to_string()).collect();
    v.sort();
    v
}

#[test]
fn intro_graph_rings_of_p1() {
    let g = common::intro_graph();
    let p = bfs_rings(&g, g.index_of("P1").unwrap(), 2).unwrap();
    assert_eq!(sorted_names(&g, &p.ring(0)), ["P1"]);
    assert_eq!(sorted_names(&g, &p.ring(1)), ["A1", "A3", "P2", "S1"]);
    assert_eq!(sorted_names(&g, &p.ring(2)), ["P3", "P4"]);
    // A2 sits three hops away
    assert!(!p.ring(2).contains(&g.index_of("A2").unwrap()));
    assert_eq!(p.total_members(), 7);
}

#[test]
fn typed_buckets_of_first_ring() {
    let g = common::typed_ring_graph();
    let p = bfs_rings(&g, g.index_of("P1").unwrap(), 1).unwrap();
    assert_eq!(sorted_names(&g, p.bucket(1, 0)), ["P6"]);
    assert_eq!(sorted_names(&g, p.bucket(1, 1)), ["A1", "A2", "A3"]);
    assert_eq!(sorted_names(&g, p.bucket(1, 2)), ["S1"]);
}

#[test]
fn star_center_bucket_sizes_equal_leaf_type_counts() {
    let mut b = GraphBuilder::new(["hub", "x", "y"], 1);
    let c = b.add_node("c", 0).unwrap();
    b.set_features(c, &[0.0]).unwrap();
    let leaf_types = [1u32, 2, 1, 1, 2, 1, 0];
    for (i, &t) in leaf_types.iter().enumerate() {
        let u = b.add_node(format!("l{i}"), t).unwrap();
        b.set_features(u, &[i as f32]).unwrap();
        b.add_edge(c, u, "e").unwrap();
    }
    let g = b.build(BuildOptions::default()).unwrap();
    let tok = pool_tokens(&g, &bfs_rings(&g, c, 1).unwrap());
    assert_eq!(tok.count(1, 0), 1);
    assert_eq!(tok.count(1, 1), 4);
    assert_eq!(tok.count(1, 2), 2);
}

#[test]
fn equal_features_pool_to_the_same_vector() {
    let g = common::typed_ring_graph();
    let mut b = GraphBuilder::new(g.type_names().iter().cloned(), g.d_in());
    for u in 0..g.num_nodes() as NodeId {
        let id = b.add_node(g.node_name(u), g.node_type(u)).unwrap();
        let row = if g.node_type(u) == 1 { vec![0.7, -1.5, 2.0, 0.0] } else { g.features(u).to_vec() };
        b.set_features(id, &row).unwrap();
    }
    for (u, v, r) in g.edges() {
        b.add_edge(u, v, &g.relation_names()[r as usize]).unwrap();
    }
    let g = b.build(BuildOptions::default()).unwrap();
    let tok = pool_tokens(&g, &bfs_rings(&g, g.index_of("P1").unwrap(), 1).unwrap());
    assert_eq!(tok.token(1, 1), &[0.7, -1.5, 2.0, 0.0]);
}

#[test]
fn two_member_bucket_is_the_midpoint() {
    let g = common::typed_ring_graph();
    let a1 = g.index_of("A1").unwrap();
    let p = bfs_rings(&g, a1, 1).unwrap();
    assert_eq!(sorted_names(&g, p.bucket(1, 0)), ["P1", "P2"]);
    let tok = pool_tokens(&g, &p);
    let (f1, f2) = (g.features(g.index_of("P1").unwrap()), g.features(g.index_of("P2").unwrap()));
    for j in 0..g.d_in() {
        let want = (f64::from(f1[j]) + f64::from(f2[j])) / 2.0;
        assert!((f64::from(tok.token(1, 0)[j]) - want).abs() < 1e-6);
    }
}

#[test]
fn empty_bucket_is_zero_and_unoccupied() {
    let g = common::intro_graph();
    let tok = pool_tokens(&g, &bfs_rings(&g, g.index_of("P1").unwrap(), 2).unwrap());
    assert!(!tok.occupied(2, 2));
    assert!(tok.token(2, 2).iter().all(|&x| x == 0.0));
}

#[test]
fn cache_is_byte_identical_across_runs_and_thread_counts() {
    let g = common::random_typed_graph(5, 150, 3, 0.04, 6);
    let a = precompute_all(&g, 3, CacheScope::AllNodes).unwrap().to_bytes();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| precompute_all(&g, 3, CacheScope::AllNodes).unwrap().to_bytes());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let c = pool.install(|| precompute_all(&g, 3, CacheScope::AllNodes).unwrap().to_bytes());
    assert_eq!(a, b);
    assert_eq!(a, c);
}

fn check_against_oracle(g: &HinGraph, dist: &[Vec<usize>], u: NodeId, k: usize, p: &RingPartition) {
    let mut seen = 0;
    for ring in 0..=k {
        for t in 0..g.num_types() {
            for &v in p.bucket(ring, t) {
                assert_eq!(dist[u as usize][v as usize], ring, "node {v} in ring {ring}");
                assert_eq!(g.node_type(v) as usize, t);
                seen += 1;
            }
        }
    }
    let within = dist[u as usize].iter().filter(|&&d| d <= k).count();
    assert_eq!(seen, within, "every node within {k} hops appears exactly once");
}

/// Rebuilds `g` with edges inserted in a shuffled order.
fn reshuffled(g: &HinGraph, seed: u64) -> HinGraph {
    let mut b = GraphBuilder::new(g.type_names().iter().cloned(), g.d_in())
        .with_relations(g.relation_names().iter().cloned());
    for u in 0..g.num_nodes() as NodeId {
        let id = b.add_node(g.node_name(u), g.node_type(u)).unwrap();
        b.set_features(id, g.features(u)).unwrap();
    }
    let mut edges = g.edges();
    edges.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (u, v, r) in edges {
        let (a, c) = if seed % 2 == 0 { (u, v) } else { (v, u) };
        b.add_edge(a, c, &g.relation_names()[r as usize]).unwrap();
    }
    b.build(BuildOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rings_match_brute_force_distances(seed in 0u64..10_000, n in 1usize..80, k in 1usize..5, pe in 0.0f64..0.15) {
        let g = common::random_typed_graph(seed, n, 3, pe, 2);
        let dist = common::oracle::all_pairs_distances(&g);
        for u in 0..g.num_nodes() as NodeId {
            let p = bfs_rings(&g, u, k).unwrap();
            prop_assert_eq!(p.bucket(0, g.node_type(u) as usize), &[u]);
            check_against_oracle(&g, &dist, u, k, &p);
        }
    }

    #[test]
    fn tokens_are_bucket_means_and_order_independent(seed in 0u64..10_000, n in 2usize..60, k in 1usize..4) {
        let g = common::random_typed_graph(seed, n, 3, 0.08, 3);
        let h = reshuffled(&g, seed);
        for u in 0..g.num_nodes() as NodeId {
            let p = bfs_rings(&g, u, k).unwrap();
            let tok = pool_tokens(&g, &p);
            let tok_h = pool_tokens(&h, &bfs_rings(&h, u, k).unwrap());
            prop_assert_eq!(&tok, &tok_h);
            for ring in 0..=k {
                for t in 0..g.num_types() {
                    let members = p.bucket(ring, t);
                    prop_assert_eq!(tok.occupied(ring, t), !members.is_empty());
                    for j in 0..g.d_in() {
                        let want = if members.is_empty() {
                            0.0
                        } else {
                            members.iter().map(|&v| f64::from(g.features(v)[j])).sum::<f64>() / members.len() as f64
                        };
                        prop_assert!((f64::from(tok.token(ring, t)[j]) - want).abs() < 1e-6);
                    }
                }
            }
            let nonzero_ring0 = (0..g.num_types()).filter(|&t| tok.occupied(0, t)).count();
            prop_assert_eq!(nonzero_ring0, 1);
        }
    }

    #[test]
    fn hop_collapse_equals_k_hop_means(seed in 0u64..10_000, n in 2usize..60, k in 1usize..4) {
        let g = common::random_typed_graph(seed, n, 3, 0.08, 2);
        let dist = common::oracle::all_pairs_distances(&g);
        for u in 0..g.num_nodes() as NodeId {
            let hop = pool_tokens(&g, &bfs_rings(&g, u, k).unwrap()).hop_collapsed();
            for t in 0..g.num_types() {
                let members: Vec<usize> = (0..g.num_nodes())
                    .filter(|&v| (1..=k).contains(&dist[u as usize][v]) && g.node_type(v as NodeId) as usize == t)
                    .collect();
                prop_assert_eq!(hop.count(1, t) as usize, members.len());
                for j in 0..g.d_in() {
                    let want = if members.is_empty() {
                        0.0
                    } else {
                        members.iter().map(|&v| f64::from(g.features(v as NodeId)[j])).sum::<f64>() / members.len() as f64
                    };
                    prop_assert!((f64::from(hop.token(1, t)[j]) - want).abs() < 1e-5);
                }
            }
        }
    }
}
