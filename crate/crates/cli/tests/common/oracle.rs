use ringformer::graph::HinGraph;

/// All-pairs hop distances by repeated relaxation over the edge list.
/// `usize::MAX` marks unreachable pairs.
pub fn all_pairs_distances(g: &HinGraph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let mut dist = vec![vec![usize::MAX; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0;
    }
    let edges = g.edges();
    loop {
        let mut changed = false;
        for s in 0..n {
            for &(u, v, _) in &edges {
                let (u, v) = (u as usize, v as usize);
                for (a, b) in [(u, v), (v, u)] {
                    if dist[s][a] != usize::MAX && dist[s][a] + 1 < dist[s][b] {
                        dist[s][b] = dist[s][a] + 1;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}
