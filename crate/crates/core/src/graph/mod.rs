//! Heterogeneous information network: typed nodes, typed undirected edges,
//! dense node features and partial labels.

mod io;

pub use io::{
    load_graph, load_graph_dir, read_features_bin, save_graph_dir, write_features_bin, GraphFiles,
    FEATURES_MAGIC, NODES_HEADER_TAG,
};

use std::collections::HashMap;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Dense 0-based node index, assigned in node-file order.
pub type NodeId = u32;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("node index {node} out of range (|V| = {bound})")]
    Index { node: usize, bound: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildOptions {
    pub allow_self_loops: bool,
}

/// Immutable heterogeneous graph stored as CSR adjacency.
///
/// Each undirected edge appears in both endpoint lists. Neighbor lists are
/// sorted by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct HinGraph {
    node_names: Vec<String>,
    node_type: Vec<u32>,
    type_names: Vec<String>,
    relation_names: Vec<String>,
    offsets: Vec<usize>,
    adjacency: Vec<NodeId>,
    adjacency_rel: Vec<u32>,
    num_edges: usize,
    d_in: usize,
    features: Vec<f32>,
    labels: Vec<Option<u32>>,
    num_classes: usize,
    target_type: Option<u32>,
}

impl HinGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn num_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn target_type(&self) -> Option<u32> {
        self.target_type
    }

    pub fn type_names(&self) -> &[String] {
        &self.type_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    /// Original string identifier of a node.
    pub fn node_name(&self, u: NodeId) -> &str {
        &self.node_names[u as usize]
    }

    pub fn node_names(&self) -> &[String] {
        &self.node_names
    }

    pub fn node_type(&self, u: NodeId) -> u32 {
        self.node_type[u as usize]
    }

    pub fn node_types(&self) -> &[u32] {
        &self.node_type
    }

    pub fn features(&self, u: NodeId) -> &[f32] {
        let i = u as usize;
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn feature_matrix(&self) -> &[f32] {
        &self.features
    }

    pub fn label(&self, u: NodeId) -> Option<u32> {
        self.labels[u as usize]
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    /// Labeled nodes in ascending id order.
    pub fn labeled_nodes(&self) -> Vec<NodeId> {
        (0..self.num_nodes() as NodeId)
            .filter(|&u| self.labels[u as usize].is_some())
            .collect()
    }

    /// Nodes of the target type, or every node when no target type is set.
    pub fn target_nodes(&self) -> Vec<NodeId> {
        match self.target_type {
            Some(t) => (0..self.num_nodes() as NodeId)
                .filter(|&u| self.node_type[u as usize] == t)
                .collect(),
            None => (0..self.num_nodes() as NodeId).collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<NodeId> {
        self.node_names
            .iter()
            .position(|n| n == name)
            .map(|i| i as NodeId)
    }

    /// Adjacent node ids, sorted ascending. Panics on an invalid id.
    pub fn neighbor_ids(&self, u: NodeId) -> &[NodeId] {
        let i = u as usize;
        &self.adjacency[self.offsets[i]..self.offsets[i + 1]]
    }

    /// `(neighbor, relation id)` pairs in ascending neighbor order.
    pub fn neighbors(&self, u: NodeId) -> Result<Vec<(NodeId, u32)>, GraphError> {
        let i = u as usize;
        if i >= self.num_nodes() {
            return Err(GraphError::Index {
                node: i,
                bound: self.num_nodes(),
            });
        }
        let range = self.offsets[i]..self.offsets[i + 1];
        Ok(self.adjacency[range.clone()]
            .iter()
            .copied()
            .zip(self.adjacency_rel[range].iter().copied())
            .collect())
    }

    pub fn degree(&self, u: NodeId) -> usize {
        let i = u as usize;
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Per-type node counts.
    pub fn type_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_types()];
        for &t in &self.node_type {
            h[t as usize] += 1;
        }
        h
    }

    /// Undirected edges `(u, v, relation)` with `u <= v`, in CSR order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId, u32)> {
        let mut out = Vec::with_capacity(self.num_edges);
        for u in 0..self.num_nodes() as NodeId {
            for (v, r) in self.neighbors(u).expect("valid id") {
                if u <= v {
                    out.push((u, v, r));
                }
            }
        }
        out
    }

    /// Content hash over structure, types, features and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.num_nodes() as u64).to_le_bytes());
        for name in &self.type_names {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        for name in &self.relation_names {
            h.update(name.as_bytes());
            h.update([1u8]);
        }
        for (name, &t) in self.node_names.iter().zip(&self.node_type) {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(t.to_le_bytes());
        }
        for (u, v, r) in self.edges() {
            h.update(u.to_le_bytes());
            h.update(v.to_le_bytes());
            h.update(r.to_le_bytes());
        }
        h.update((self.d_in as u64).to_le_bytes());
        for x in &self.features {
            h.update(x.to_bits().to_le_bytes());
        }
        for l in &self.labels {
            h.update(l.map_or(u32::MAX, |c| c).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// One-line summary used by `validate` and load logging.
    pub fn summary(&self) -> String {
        let hist = self
            .type_histogram()
            .iter()
            .zip(&self.type_names)
            .map(|(c, n)| format!("{n}={c}"))
            .collect::<Vec<_>>()
            .join(" ");
        format!(
            "nodes={} edges={} types={} relations={} d_in={} labeled={} classes={} [{}]",
            self.num_nodes(),
            self.num_edges(),
            self.num_types(),
            self.num_relations(),
            self.d_in,
            self.labels.iter().filter(|l| l.is_some()).count(),
            self.num_classes,
            hist
        )
    }
}

/// Incremental constructor for [`HinGraph`]; all invariants are checked in
/// [`GraphBuilder::build`].
#[derive(Clone, Debug)]
pub struct GraphBuilder {
    type_names: Vec<String>,
    relation_names: Vec<String>,
    d_in: usize,
    node_names: Vec<String>,
    node_lookup: HashMap<String, NodeId>,
    node_type: Vec<u32>,
    features: Vec<Option<Vec<f32>>>,
    edges: Vec<(NodeId, NodeId, u32)>,
    labels: Vec<Option<u32>>,
    target_type: Option<u32>,
}

impl GraphBuilder {
    pub fn new<I, N>(type_names: I, d_in: usize) -> Self
    where
        I: IntoIterator<Item = N>,
        N: Into<String>,
    {
        Self {
            type_names: type_names.into_iter().map(Into::into).collect(),
            relation_names: Vec::new(),
            d_in,
            node_names: Vec::new(),
            node_lookup: HashMap::new(),
            node_type: Vec::new(),
            features: Vec::new(),
            edges: Vec::new(),
            labels: Vec::new(),
            target_type: None,
        }
    }

    /// Fixes the relation id order; relations not listed get ids on first use.
    pub fn with_relations<I, N>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = N>,
        N: Into<String>,
    {
        self.relation_names = names.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_target_type(mut self, t: u32) -> Self {
        self.target_type = Some(t);
        self
    }

    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.node_lookup.get(name).copied()
    }

    pub fn type_id(&self, name: &str) -> Option<u32> {
        self.type_names.iter().position(|n| n == name).map(|i| i as u32)
    }

    pub fn relation_id(&mut self, name: &str) -> u32 {
        match self.relation_names.iter().position(|n| n == name) {
            Some(i) => i as u32,
            None => {
                self.relation_names.push(name.to_string());
                (self.relation_names.len() - 1) as u32
            }
        }
    }

    pub fn add_node(&mut self, name: impl Into<String>, node_type: u32) -> Result<NodeId, GraphError> {
        let name = name.into();
        if node_type as usize >= self.type_names.len() {
            return Err(GraphError::Validation(format!(
                "node {name}: type id {node_type} not declared (T = {})",
                self.type_names.len()
            )));
        }
        if self.node_lookup.contains_key(&name) {
            return Err(GraphError::Validation(format!("duplicate node id {name}")));
        }
        let id = self.node_type.len() as NodeId;
        self.node_lookup.insert(name.clone(), id);
        self.node_names.push(name);
        self.node_type.push(node_type);
        self.features.push(None);
        self.labels.push(None);
        Ok(id)
    }

    pub fn set_features(&mut self, u: NodeId, row: &[f32]) -> Result<(), GraphError> {
        self.check_node(u)?;
        if row.len() != self.d_in {
            return Err(GraphError::Validation(format!(
                "node {}: feature dimension {} != d_in {}",
                self.node_names[u as usize],
                row.len(),
                self.d_in
            )));
        }
        self.features[u as usize] = Some(row.to_vec());
        Ok(())
    }

    pub fn add_edge(&mut self, u: NodeId, v: NodeId, relation: &str) -> Result<(), GraphError> {
        self.check_node(u)?;
        self.check_node(v)?;
        let r = self.relation_id(relation);
        self.edges.push((u, v, r));
        Ok(())
    }

    pub fn set_label(&mut self, u: NodeId, class: u32) -> Result<(), GraphError> {
        self.check_node(u)?;
        self.labels[u as usize] = Some(class);
        Ok(())
    }

    fn check_node(&self, u: NodeId) -> Result<(), GraphError> {
        if (u as usize) < self.node_type.len() {
            Ok(())
        } else {
            Err(GraphError::Index {
                node: u as usize,
                bound: self.node_type.len(),
            })
        }
    }

    pub fn build(self, opts: BuildOptions) -> Result<HinGraph, GraphError> {
        let n = self.node_type.len();
        if self.type_names.len() < 2 && self.relation_names.len() < 2 {
            return Err(GraphError::Validation(format!(
                "not heterogeneous: {} node types and {} relation types (need T >= 2 or R >= 2)",
                self.type_names.len(),
                self.relation_names.len()
            )));
        }

        let mut features = Vec::with_capacity(n * self.d_in);
        for (i, f) in self.features.iter().enumerate() {
            match f {
                Some(row) => features.extend_from_slice(row),
                None => {
                    return Err(GraphError::Validation(format!(
                        "node {} has no feature row",
                        self.node_names[i]
                    )))
                }
            }
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(GraphError::Validation("non-finite feature value".into()));
        }

        let mut pairs: Vec<(NodeId, NodeId, u32)> = Vec::with_capacity(self.edges.len());
        for &(u, v, r) in &self.edges {
            if u == v && !opts.allow_self_loops {
                return Err(GraphError::Validation(format!(
                    "self-loop on node {} (pass allow_self_loops to accept)",
                    self.node_names[u as usize]
                )));
            }
            pairs.push((u.min(v), u.max(v), r));
        }
        pairs.sort_unstable_by_key(|&(u, v, _)| (u, v));
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0 && w[0].1 == w[1].1) {
            return Err(GraphError::Validation(format!(
                "duplicate undirected edge {} - {}",
                self.node_names[w[0].0 as usize], self.node_names[w[0].1 as usize]
            )));
        }

        let mut degree = vec![0usize; n];
        for &(u, v, _) in &pairs {
            degree[u as usize] += 1;
            if u != v {
                degree[v as usize] += 1;
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let total = *offsets.last().unwrap();
        let mut adjacency = vec![0 as NodeId; total];
        let mut adjacency_rel = vec![0u32; total];
        let mut fill = offsets[..n].to_vec();
        for &(u, v, r) in &pairs {
            adjacency[fill[u as usize]] = v;
            adjacency_rel[fill[u as usize]] = r;
            fill[u as usize] += 1;
            if u != v {
                adjacency[fill[v as usize]] = u;
                adjacency_rel[fill[v as usize]] = r;
                fill[v as usize] += 1;
            }
        }
        for i in 0..n {
            let range = offsets[i]..offsets[i + 1];
            let mut row: Vec<(NodeId, u32)> = adjacency[range.clone()]
                .iter()
                .copied()
                .zip(adjacency_rel[range.clone()].iter().copied())
                .collect();
            row.sort_unstable();
            for (k, (v, r)) in row.into_iter().enumerate() {
                adjacency[offsets[i] + k] = v;
                adjacency_rel[offsets[i] + k] = r;
            }
        }

        let mut target_type = self.target_type;
        let mut num_classes = 0usize;
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = *l {
                let t = self.node_type[i];
                match target_type {
                    None => target_type = Some(t),
                    Some(tt) if tt != t => {
                        return Err(GraphError::Validation(format!(
                            "labeled node {} has type {} but target type is {}",
                            self.node_names[i],
                            self.type_names[t as usize],
                            self.type_names[tt as usize]
                        )))
                    }
                    _ => {}
                }
                num_classes = num_classes.max(c as usize + 1);
            }
        }

        Ok(HinGraph {
            node_names: self.node_names,
            node_type: self.node_type,
            type_names: self.type_names,
            relation_names: self.relation_names,
            offsets,
            adjacency,
            adjacency_rel,
            num_edges: pairs.len(),
            d_in: self.d_in,
            features,
            labels: self.labels,
            num_classes,
            target_type,
        })
    }
}
