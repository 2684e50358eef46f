#![allow(dead_code)]

pub mod model_oracle;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ringformer::graph::{BuildOptions, GraphBuilder, HinGraph};

fn build(types: &[&str], nodes: &[(&str, u32)], edges: &[(&str, &str, &str)], d: usize) -> HinGraph {
    let mut b = GraphBuilder::new(types.iter().copied(), d);
    for (i, &(name, t)) in nodes.iter().enumerate() {
        let u = b.add_node(name, t).unwrap();
        let row: Vec<f32> = (0..d).map(|j| (i * d + j) as f32 * 0.25 - 1.0).collect();
        b.set_features(u, &row).unwrap();
    }
    for &(s, t, r) in edges {
        let (u, v) = (b.node_id(s).unwrap(), b.node_id(t).unwrap());
        b.add_edge(u, v, r).unwrap();
    }
    b.build(BuildOptions::default()).unwrap()
}

/// Small academic graph: P1 cites P2, is written by A1 and A3, belongs to
/// S1; A1 wrote P3, S1 holds P4, and A2 co-wrote P3.
pub fn intro_graph() -> HinGraph {
    build(
        &["paper", "author", "subject"],
        &[
            ("P1", 0),
            ("P2", 0),
            ("P3", 0),
            ("P4", 0),
            ("A1", 1),
            ("A2", 1),
            ("A3", 1),
            ("S1", 2),
        ],
        &[
            ("P1", "P2", "cite"),
            ("P1", "A1", "write"),
            ("P1", "A3", "write"),
            ("P1", "S1", "belong"),
            ("A1", "P3", "write"),
            ("S1", "P4", "belong"),
            ("P3", "A2", "write"),
        ],
        3,
    )
}

/// P1 with one cited paper, three authors and one subject; each author and
/// the subject lead to further papers.
pub fn typed_ring_graph() -> HinGraph {
    build(
        &["paper", "author", "subject"],
        &[
            ("P1", 0),
            ("P2", 0),
            ("P3", 0),
            ("P4", 0),
            ("P5", 0),
            ("P6", 0),
            ("A1", 1),
            ("A2", 1),
            ("A3", 1),
            ("S1", 2),
        ],
        &[
            ("P1", "P6", "cite"),
            ("P1", "A1", "write"),
            ("P1", "A2", "write"),
            ("P1", "A3", "write"),
            ("P1", "S1", "belong"),
            ("A1", "P2", "write"),
            ("A2", "P3", "write"),
            ("S1", "P4", "belong"),
            ("S1", "P5", "belong"),
        ],
        4,
    )
}

/// Erdős-Rényi graph with random node types and Gaussian-ish features.
pub fn random_typed_graph(seed: u64, n: usize, types: usize, p: f64, d: usize) -> HinGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..types.max(2)).map(|t| format!("t{t}")).collect();
    let mut b = GraphBuilder::new(names.iter().cloned(), d);
    for i in 0..n {
        let u = b.add_node(format!("n{i}"), rng.random_range(0..types.max(2)) as u32).unwrap();
        let row: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        b.set_features(u, &row).unwrap();
    }
    for u in 0..n as u32 {
        for v in u + 1..n as u32 {
            if rng.random_bool(p) {
                b.add_edge(u, v, "r").unwrap();
            }
        }
    }
    b.build(BuildOptions::default()).unwrap()
}
