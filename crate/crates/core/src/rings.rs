//! Distance-ring neighborhoods split by node type, pooled into fixed-shape
//! token tensors, and a binary cache of those tensors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{HinGraph, NodeId};

pub const CACHE_MAGIC: &[u8; 4] = b"R2T1";
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 4 + 8 + 8;
const FLAG_ALL_NODES: u32 = 1;

#[derive(Debug, Error)]
pub enum RingError {
    #[error("ring count K must be >= 1, got {0}")]
    InvalidK(usize),
    #[error("node index {node} out of range (|V| = {bound})")]
    Index { node: usize, bound: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt token cache: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("token cache does not match graph: {0}")]
    Stale(String),
}

/// Nodes at each exact hop distance `0..=K` from a target, bucketed by type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RingPartition {
    target: NodeId,
    /// `rings[k][t]`, each bucket sorted ascending.
    rings: Vec<Vec<Vec<NodeId>>>,
}

impl RingPartition {
    pub fn target(&self) -> NodeId {
        self.target
    }

    /// `K`, the outermost ring index.
    pub fn k(&self) -> usize {
        self.rings.len() - 1
    }

    pub fn num_types(&self) -> usize {
        self.rings[0].len()
    }

    pub fn bucket(&self, k: usize, t: usize) -> &[NodeId] {
        &self.rings[k][t]
    }

    /// All members of ring `k`, ascending.
    pub fn ring(&self, k: usize) -> Vec<NodeId> {
        let mut all: Vec<NodeId> = self.rings[k].iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn total_members(&self) -> usize {
        self.rings.iter().flatten().map(Vec::len).sum()
    }
}

/// Reusable BFS state; avoids reallocating a |V|-sized marker per call.
pub struct RingScratch {
    stamp: Vec<u32>,
    epoch: u32,
}

impl RingScratch {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            stamp: vec![0; num_nodes],
            epoch: 0,
        }
    }

    fn next_epoch(&mut self) -> u32 {
        if self.epoch == u32::MAX {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 0;
        }
        self.epoch += 1;
        self.epoch
    }
}

/// Frontier-by-frontier BFS from `u`, ignoring relation types. Nodes
/// farther than `k` hops are omitted.
pub fn bfs_rings(g: &HinGraph, u: NodeId, k: usize) -> Result<RingPartition, RingError> {
    bfs_rings_with(g, u, k, &mut RingScratch::new(g.num_nodes()))
}

pub fn bfs_rings_with(
    g: &HinGraph,
    u: NodeId,
    k: usize,
    scratch: &mut RingScratch,
) -> Result<RingPartition, RingError> {
    if k == 0 {
        return Err(RingError::InvalidK(k));
    }
    if u as usize >= g.num_nodes() {
        return Err(RingError::Index {
            node: u as usize,
            bound: g.num_nodes(),
        });
    }
    if scratch.stamp.len() != g.num_nodes() {
        *scratch = RingScratch::new(g.num_nodes());
    }
    let epoch = scratch.next_epoch();
    let t_count = g.num_types();
    let mut rings = vec![vec![Vec::new(); t_count]; k + 1];
    rings[0][g.node_type(u) as usize].push(u);
    scratch.stamp[u as usize] = epoch;
    let mut frontier = vec![u];
    for ring in rings.iter_mut().skip(1) {
        let mut next = Vec::new();
        for &v in &frontier {
            for &w in g.neighbor_ids(v) {
                if scratch.stamp[w as usize] != epoch {
                    scratch.stamp[w as usize] = epoch;
                    next.push(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        for &w in &next {
            ring[g.node_type(w) as usize].push(w);
        }
        for bucket in ring.iter_mut() {
            bucket.sort_unstable();
        }
        frontier = next;
    }
    Ok(RingPartition { target: u, rings })
}

/// Mean-pooled bucket features for one target node.
///
/// Layout is `[k][t][d]` row-major. `counts[k][t]` is the bucket size, so
/// coarser views (hop-collapsed, type-collapsed) can be derived exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    target: NodeId,
    k: usize,
    t: usize,
    d_in: usize,
    counts: Vec<u32>,
    tokens: Vec<f32>,
}

impl TokenTensor {
    pub fn new(
        target: NodeId,
        k: usize,
        t: usize,
        d_in: usize,
        counts: Vec<u32>,
        tokens: Vec<f32>,
    ) -> Result<Self, String> {
        let cells = (k + 1) * t;
        if counts.len() != cells || tokens.len() != cells * d_in {
            return Err(format!(
                "token tensor buffers ({} counts, {} values) do not match {}x{}x{}",
                counts.len(),
                tokens.len(),
                k + 1,
                t,
                d_in
            ));
        }
        Ok(Self {
            target,
            k,
            t,
            d_in,
            counts,
            tokens,
        })
    }

    pub fn target(&self) -> NodeId {
        self.target
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_rings(&self) -> usize {
        self.k + 1
    }

    pub fn num_types(&self) -> usize {
        self.t
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.k + 1, self.t, self.d_in]
    }

    pub fn token(&self, k: usize, t: usize) -> &[f32] {
        let i = (k * self.t + t) * self.d_in;
        &self.tokens[i..i + self.d_in]
    }

    /// The `T × d_in` block of ring `k`.
    pub fn ring(&self, k: usize) -> &[f32] {
        let i = k * self.t * self.d_in;
        &self.tokens[i..i + self.t * self.d_in]
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn count(&self, k: usize, t: usize) -> u32 {
        self.counts[k * self.t + t]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn occupied(&self, k: usize, t: usize) -> bool {
        self.count(k, t) > 0
    }

    pub fn occupancy(&self) -> Vec<bool> {
        self.counts.iter().map(|&c| c > 0).collect()
    }

    /// Merges rings `1..=K` into a single ring: bucket `t` becomes the mean
    /// over every node of type `t` within `K` hops. Ring 0 is kept.
    pub fn hop_collapsed(&self) -> TokenTensor {
        let (t_n, d) = (self.t, self.d_in);
        let mut counts = vec![0u32; 2 * t_n];
        let mut tokens = vec![0f32; 2 * t_n * d];
        counts[..t_n].copy_from_slice(&self.counts[..t_n]);
        tokens[..t_n * d].copy_from_slice(&self.tokens[..t_n * d]);
        for t in 0..t_n {
            let mut acc = vec![0f64; d];
            let mut n = 0u64;
            for k in 1..=self.k {
                let c = self.count(k, t);
                if c == 0 {
                    continue;
                }
                n += u64::from(c);
                for (a, &x) in acc.iter_mut().zip(self.token(k, t)) {
                    *a += f64::from(c) * f64::from(x);
                }
            }
            counts[t_n + t] = n as u32;
            if n > 0 {
                let out = &mut tokens[(t_n + t) * d..(t_n + t + 1) * d];
                for (o, a) in out.iter_mut().zip(&acc) {
                    *o = (a / n as f64) as f32;
                }
            }
        }
        TokenTensor {
            target: self.target,
            k: 1,
            t: t_n,
            d_in: d,
            counts,
            tokens,
        }
    }

    /// Merges all type buckets of each ring into one untyped bucket.
    pub fn type_collapsed(&self) -> TokenTensor {
        let d = self.d_in;
        let rings = self.k + 1;
        let mut counts = vec![0u32; rings];
        let mut tokens = vec![0f32; rings * d];
        for k in 0..rings {
            let mut acc = vec![0f64; d];
            let mut n = 0u64;
            for t in 0..self.t {
                let c = self.count(k, t);
                if c == 0 {
                    continue;
                }
                n += u64::from(c);
                for (a, &x) in acc.iter_mut().zip(self.token(k, t)) {
                    *a += f64::from(c) * f64::from(x);
                }
            }
            counts[k] = n as u32;
            if n > 0 {
                for (o, a) in tokens[k * d..(k + 1) * d].iter_mut().zip(&acc) {
                    *o = (a / n as f64) as f32;
                }
            }
        }
        TokenTensor {
            target: self.target,
            k: self.k,
            t: 1,
            d_in: d,
            counts,
            tokens,
        }
    }
}

/// Per-bucket mean of raw features, accumulated in `f64` over members in
/// ascending id order. Empty buckets are zero.
pub fn pool_tokens(g: &HinGraph, p: &RingPartition) -> TokenTensor {
    let (k, t_n, d) = (p.k(), p.num_types(), g.d_in());
    let mut counts = Vec::with_capacity((k + 1) * t_n);
    let mut tokens = vec![0f32; (k + 1) * t_n * d];
    let mut acc = vec![0f64; d];
    for ring in 0..=k {
        for t in 0..t_n {
            let bucket = p.bucket(ring, t);
            counts.push(bucket.len() as u32);
            if bucket.is_empty() {
                continue;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &v in bucket {
                for (a, &x) in acc.iter_mut().zip(g.features(v)) {
                    *a += f64::from(x);
                }
            }
            let n = bucket.len() as f64;
            let i = (ring * t_n + t) * d;
            for (o, a) in tokens[i..i + d].iter_mut().zip(&acc) {
                *o = (a / n) as f32;
            }
        }
    }
    TokenTensor {
        target: p.target(),
        k,
        t: t_n,
        d_in: d,
        counts,
        tokens,
    }
}

/// Which nodes get a token tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CacheScope {
    /// Nodes of the graph's target type, or every node if none is set.
    #[default]
    TargetType,
    AllNodes,
}

/// Token tensors for a set of nodes, ascending by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCache {
    k: usize,
    t: usize,
    d_in: usize,
    scope: CacheScope,
    fingerprint: u64,
    entries: Vec<TokenTensor>,
}

impl TokenCache {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_types(&self) -> usize {
        self.t
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn scope(&self) -> CacheScope {
        self.scope
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TokenTensor] {
        &self.entries
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.entries.iter().map(TokenTensor::target).collect()
    }

    pub fn get(&self, u: NodeId) -> Option<&TokenTensor> {
        self.entries
            .binary_search_by_key(&u, TokenTensor::target)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Errors unless the cache was built from `g` with ring count `k`.
    pub fn check_matches(&self, g: &HinGraph, k: usize) -> Result<(), RingError> {
        if self.k != k {
            return Err(RingError::Stale(format!("cache has K = {}, expected {k}", self.k)));
        }
        if self.fingerprint != g.fingerprint() {
            return Err(RingError::Stale(format!(
                "graph fingerprint {:016x} != cached {:016x}",
                g.fingerprint(),
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// Serialized cache bytes.
    ///
    /// Layout (little-endian): `R2T1`, `K: u32`, `T: u32`, `d_in: u32`,
    /// `count: u64`, `flags: u32` (bit 0 = all nodes), graph fingerprint
    /// `u64`, payload checksum `u64` (truncated SHA-256 of everything after
    /// the header). Per node: id `u64`, occupancy bitmap of `(K+1)·T` bits
    /// rounded up to whole bytes, `(K+1)·T` bucket sizes as `u32`, then the
    /// `f32` tokens.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cells = (self.k + 1) * self.t;
        let bitmap = cells.div_ceil(8);
        let per = 8 + bitmap + 4 * cells + 4 * cells * self.d_in;
        let mut payload = Vec::with_capacity(per * self.entries.len());
        for e in &self.entries {
            payload.extend_from_slice(&u64::from(e.target).to_le_bytes());
            let mut bits = vec![0u8; bitmap];
            for (i, &c) in e.counts.iter().enumerate() {
                if c > 0 {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            payload.extend_from_slice(&bits);
            for c in &e.counts {
                payload.extend_from_slice(&c.to_le_bytes());
            }
            for x in &e.tokens {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.t as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        let flags = if self.scope == CacheScope::AllNodes { FLAG_ALL_NODES } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&checksum(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, RingError> {
        let corrupt = |msg: String| RingError::Corrupt {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < HEADER_LEN || &bytes[..4] != CACHE_MAGIC {
            return Err(corrupt("bad magic or truncated header".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let (k, t, d_in) = (u32_at(4), u32_at(8), u32_at(12));
        let count = u64_at(16) as usize;
        let flags = u32_at(24) as u32;
        let fingerprint = u64_at(28);
        let sum = u64_at(36);
        let payload = &bytes[HEADER_LEN..];
        if k == 0 || t == 0 {
            return Err(corrupt(format!("invalid header K = {k}, T = {t}")));
        }
        let cells = (k + 1) * t;
        let bitmap = cells.div_ceil(8);
        let per = 8 + bitmap + 4 * cells + 4 * cells * d_in;
        if payload.len() != per * count {
            return Err(corrupt(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                per * count
            )));
        }
        if checksum(payload) != sum {
            return Err(corrupt("checksum mismatch".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for chunk in payload.chunks_exact(per) {
            let target = u64::from_le_bytes(chunk[..8].try_into().unwrap()) as NodeId;
            let bits = &chunk[8..8 + bitmap];
            let mut off = 8 + bitmap;
            let mut counts = Vec::with_capacity(cells);
            for i in 0..cells {
                let c = u32::from_le_bytes(chunk[off..off + 4].try_into().unwrap());
                let bit = bits[i / 8] >> (i % 8) & 1 == 1;
                if bit != (c > 0) {
                    return Err(corrupt(format!("node {target}: occupancy bit disagrees with count")));
                }
                counts.push(c);
                off += 4;
            }
            let tokens = chunk[off..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            entries.push(TokenTensor {
                target,
                k,
                t,
                d_in,
                counts,
                tokens,
            });
        }
        if entries.windows(2).any(|w| w[0].target >= w[1].target) {
            return Err(corrupt("node ids not strictly ascending".into()));
        }
        Ok(Self {
            k,
            t,
            d_in,
            scope: if flags & FLAG_ALL_NODES != 0 { CacheScope::AllNodes } else { CacheScope::TargetType },
            fingerprint,
            entries,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<(), RingError> {
        let io = |source| RingError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = fs::File::create(&tmp).map_err(io)?;
            f.write_all(&self.to_bytes()).map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, RingError> {
        let bytes = fs::read(path).map_err(|source| RingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

fn checksum(payload: &[u8]) -> u64 {
    let digest = Sha256::digest(payload);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Builds token tensors for every node in `scope`, in parallel. The result
/// does not depend on the thread count.
pub fn precompute_all(g: &HinGraph, k: usize, scope: CacheScope) -> Result<TokenCache, RingError> {
    if k == 0 {
        return Err(RingError::InvalidK(k));
    }
    let nodes: Vec<NodeId> = match scope {
        CacheScope::TargetType => g.target_nodes(),
        CacheScope::AllNodes => (0..g.num_nodes() as NodeId).collect(),
    };
    let entries = nodes
        .par_iter()
        .map_init(
            || RingScratch::new(g.num_nodes()),
            |scratch, &u| bfs_rings_with(g, u, k, scratch).map(|p| pool_tokens(g, &p)),
        )
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TokenCache {
        k,
        t: g.num_types(),
        d_in: g.d_in(),
        scope,
        fingerprint: g.fingerprint(),
        entries,
    })
}

/// Reuses `path` if it holds a valid cache for `(g, k, scope)`; otherwise
/// recomputes and rewrites it.
pub fn load_or_precompute(
    g: &HinGraph,
    k: usize,
    scope: CacheScope,
    path: &Path,
) -> Result<TokenCache, RingError> {
    if path.exists() {
        match TokenCache::read(path) {
            Ok(c) if c.scope == scope && c.check_matches(g, k).is_ok() => return Ok(c),
            Ok(_) => log::warn!("{}: stale token cache, rebuilding", path.display()),
            Err(e) => log::warn!("{e}; rebuilding"),
        }
    }
    let cache = precompute_all(g, k, scope)?;
    cache.write(path)?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures;

    fn names(g: &HinGraph, ids: &[NodeId]) -> Vec<String> {
        let mut v: Vec<String> = ids.iter().map(|&i| g.node_name(i).to_string()).collect();
        v.sort();
        v
    }

    #[test]
    fn toy_rings_of_p1() {
        let g = fixtures::intro_toy();
        let p1 = g.index_of("P1").unwrap();
        let p = bfs_rings(&g, p1, 2).unwrap();
        assert_eq!(names(&g, &p.ring(0)), ["P1"]);
        assert_eq!(names(&g, &p.ring(1)), ["A1", "A3", "P2", "S1"]);
        assert_eq!(names(&g, &p.ring(2)), ["P3", "P4"]);
        assert_eq!(p.bucket(0, 0), &[p1]);
        assert!(p.bucket(0, 1).is_empty() && p.bucket(0, 2).is_empty());
    }

    #[test]
    fn rejects_zero_k_and_bad_node() {
        let g = fixtures::intro_toy();
        assert!(matches!(bfs_rings(&g, 0, 0), Err(RingError::InvalidK(0))));
        assert!(matches!(bfs_rings(&g, 100, 1), Err(RingError::Index { .. })));
    }

    #[test]
    fn pooled_ring_zero_is_own_feature() {
        let g = fixtures::intro_toy();
        let p1 = g.index_of("P1").unwrap();
        let tok = pool_tokens(&g, &bfs_rings(&g, p1, 2).unwrap());
        assert_eq!(tok.shape(), [3, 3, 2]);
        assert_eq!(tok.token(0, 0), g.features(p1));
        assert_eq!(tok.token(0, 1), &[0.0, 0.0]);
        assert!(!tok.occupied(0, 1));
        // ring 2 has no authors or subjects
        assert!(!tok.occupied(2, 1) && !tok.occupied(2, 2));
    }

    #[test]
    fn collapsed_views_match_direct_means() {
        let g = fixtures::intro_toy();
        let p1 = g.index_of("P1").unwrap();
        let tok = pool_tokens(&g, &bfs_rings(&g, p1, 2).unwrap());
        let hop = tok.hop_collapsed();
        assert_eq!(hop.shape(), [2, 3, 2]);
        // papers within 2 hops: P2, P3, P4
        let ids: Vec<NodeId> = ["P2", "P3", "P4"].iter().map(|n| g.index_of(n).unwrap()).collect();
        let mean0 = ids.iter().map(|&i| g.features(i)[0]).sum::<f32>() / 3.0;
        assert!((hop.token(1, 0)[0] - mean0).abs() < 1e-6);
        assert_eq!(hop.count(1, 0), 3);

        let flat = tok.type_collapsed();
        assert_eq!(flat.shape(), [3, 1, 2]);
        assert_eq!(flat.count(1, 0), 4);
        let ring1 = bfs_rings(&g, p1, 2).unwrap().ring(1);
        let m = ring1.iter().map(|&i| f64::from(g.features(i)[0])).sum::<f64>() / 4.0;
        assert!((f64::from(flat.token(1, 0)[0]) - m).abs() < 1e-6);
    }

    #[test]
    fn cache_round_trip_and_corruption() {
        let g = fixtures::intro_toy();
        let cache = precompute_all(&g, 2, CacheScope::AllNodes).unwrap();
        assert_eq!(cache.len(), g.num_nodes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.r2t");
        cache.write(&path).unwrap();
        let back = TokenCache::read(&path).unwrap();
        assert_eq!(back, cache);
        back.check_matches(&g, 2).unwrap();
        assert!(back.check_matches(&g, 3).is_err());

        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(
            TokenCache::from_bytes(&bytes, &path),
            Err(RingError::Corrupt { .. })
        ));
        bytes.truncate(last);
        assert!(TokenCache::from_bytes(&bytes, &path).is_err());
    }
}
