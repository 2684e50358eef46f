//! Seeded synthetic heterogeneous graphs with planted class signal.
//!
//! Target nodes have type `paper`. In ring-distance mode the class lives only
//! in `author` nodes two hops away, and every one-hop author carries a random
//! class vector. In type-mix mode the class lives in one-hop `author` nodes,
//! while each author's paired `subject` carries the complementary vector, so
//! the untyped one-hop mean is the same for every class.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::graph::{save_graph_dir, BuildOptions, GraphBuilder, HinGraph, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    RingDistance,
    TypeMix,
}

impl std::str::FromStr for SignalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ring-distance" => Ok(Self::RingDistance),
            "type-mix" => Ok(Self::TypeMix),
            _ => Err(format!("unknown signal mode {s:?} (ring-distance | type-mix)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_types: usize,
    pub classes: usize,
    pub nodes_per_class: usize,
    pub signal: SignalMode,
    /// Fraction of planted signal nodes relabeled to a wrong class.
    pub noise: f64,
    pub seed: u64,
    #[serde(default = "default_signals")]
    pub signals_per_target: usize,
    #[serde(default = "default_decoys")]
    pub decoys_per_target: usize,
    #[serde(default = "default_noise_dims")]
    pub noise_dims: usize,
    #[serde(default = "default_subjects")]
    pub subjects: usize,
}

fn default_signals() -> usize {
    3
}
fn default_decoys() -> usize {
    12
}
fn default_noise_dims() -> usize {
    5
}
fn default_subjects() -> usize {
    10
}

impl SyntheticSpec {
    pub fn new(signal: SignalMode, classes: usize, nodes_per_class: usize, seed: u64) -> Self {
        Self {
            num_types: 3,
            classes,
            nodes_per_class,
            signal,
            noise: 0.0,
            seed,
            signals_per_target: default_signals(),
            decoys_per_target: default_decoys(),
            noise_dims: default_noise_dims(),
            subjects: default_subjects(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.classes + self.noise_dims
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let min_types = match self.signal {
            SignalMode::RingDistance => 2,
            SignalMode::TypeMix => 3,
        };
        let bad = |m: String| Err(EvalError::Input(m));
        if self.num_types < min_types {
            return bad(format!("{:?} needs at least {min_types} node types", self.signal));
        }
        if self.classes < 2 || self.nodes_per_class == 0 {
            return bad("need at least 2 classes and 1 node per class".into());
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise = {} outside [0, 1]", self.noise));
        }
        if self.signals_per_target == 0 {
            return bad("signals_per_target must be positive".into());
        }
        if self.signal == SignalMode::RingDistance && self.decoys_per_target < self.signals_per_target {
            return bad("decoys_per_target must be >= signals_per_target".into());
        }
        if self.num_types >= 3 && self.subjects == 0 && self.signal == SignalMode::RingDistance {
            return bad("subjects must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTarget {
    pub node: String,
    pub label: usize,
    /// Class carried by each planted signal node.
    pub planted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticSpec,
    pub num_nodes: usize,
    pub num_edges: usize,
    pub d_in: usize,
    pub targets: Vec<PlantedTarget>,
}

impl SyntheticManifest {
    /// Targets whose label is not the strict plurality of planted classes.
    pub fn self_check(&self) -> Vec<String> {
        let k = self.spec.classes;
        self.targets
            .iter()
            .filter(|t| {
                let mut votes = vec![0usize; k];
                for &c in &t.planted {
                    votes[c] += 1;
                }
                let top = votes[t.label];
                votes.iter().enumerate().any(|(c, &v)| c != t.label && v >= top)
            })
            .map(|t| t.node.clone())
            .collect()
    }
}

fn type_names(num_types: usize) -> Vec<String> {
    let mut names: Vec<String> = ["paper", "author", "subject"].iter().take(num_types).map(|s| s.to_string()).collect();
    for t in 3..num_types {
        names.push(format!("extra{t}"));
    }
    names
}

struct FeatureGen {
    classes: usize,
    noise_dims: usize,
    normal: Normal<f64>,
}

impl FeatureGen {
    fn row(&self, class_part: &[f32], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut row = Vec::with_capacity(self.classes + self.noise_dims);
        row.extend_from_slice(class_part);
        for _ in 0..self.noise_dims {
            row.push(self.normal.sample(rng) as f32);
        }
        row
    }

    fn one_hot(&self, c: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.classes];
        v[c] = 1.0;
        v
    }

    fn complement(&self, c: usize) -> Vec<f32> {
        let mut v = vec![1.0; self.classes];
        v[c] = 0.0;
        v
    }
}

fn corrupt(label: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.signals_per_target;
    let flips = ((spec.noise * n as f64).floor() as usize).min(n);
    let mut planted = vec![label; n];
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    for &s in &slots[..flips] {
        let shift = rng.random_range(1..spec.classes);
        planted[s] = (label + shift) % spec.classes;
    }
    planted
}

/// Builds the graph and its manifest. Same spec, same output.
pub fn generate_synthetic_hin(spec: &SyntheticSpec) -> Result<(HinGraph, SyntheticManifest), EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fg = FeatureGen {
        classes: spec.classes,
        noise_dims: spec.noise_dims,
        normal: Normal::new(0.0, 0.5).expect("valid normal"),
    };
    let zeros = vec![0.0f32; spec.classes];
    let mut b = GraphBuilder::new(type_names(spec.num_types), spec.d_in()).with_target_type(0);
    let n_targets = spec.classes * spec.nodes_per_class;
    let mut targets = Vec::with_capacity(n_targets);
    let mut target_ids = Vec::with_capacity(n_targets);
    for i in 0..n_targets {
        let name = format!("p{i}");
        let u = b.add_node(name.clone(), 0)?;
        let label = i % spec.classes;
        b.set_features(u, &fg.row(&zeros, &mut rng))?;
        b.set_label(u, label as u32)?;
        target_ids.push(u);
        targets.push(PlantedTarget {
            node: name,
            label,
            planted: Vec::new(),
        });
    }
    let mut next_author = 0usize;
    let mut new_author = |b: &mut GraphBuilder, row: &[f32], rng: &mut ChaCha8Rng| -> Result<NodeId, EvalError> {
        let u = b.add_node(format!("a{next_author}"), 1)?;
        next_author += 1;
        b.set_features(u, &fg.row(row, rng))?;
        Ok(u)
    };
    match spec.signal {
        SignalMode::RingDistance => {
            let subjects: Vec<NodeId> = if spec.num_types >= 3 {
                (0..spec.subjects)
                    .map(|s| {
                        let u = b.add_node(format!("s{s}"), 2)?;
                        b.set_features(u, &fg.row(&zeros, &mut rng))?;
                        Ok(u)
                    })
                    .collect::<Result<_, EvalError>>()?
            } else {
                Vec::new()
            };
            for (i, &p) in target_ids.iter().enumerate() {
                let planted = corrupt(targets[i].label, spec, &mut rng);
                let mut decoys = Vec::with_capacity(spec.decoys_per_target);
                for _ in 0..spec.decoys_per_target {
                    let c = rng.random_range(0..spec.classes);
                    let a = new_author(&mut b, &fg.one_hot(c), &mut rng)?;
                    b.add_edge(p, a, "writes")?;
                    decoys.push(a);
                }
                decoys.shuffle(&mut rng);
                for (j, &c) in planted.iter().enumerate() {
                    let a = new_author(&mut b, &fg.one_hot(c), &mut rng)?;
                    b.add_edge(decoys[j], a, "coauthor")?;
                }
                if !subjects.is_empty() {
                    let s = subjects[rng.random_range(0..subjects.len())];
                    b.add_edge(p, s, "about")?;
                }
                targets[i].planted = planted;
            }
        }
        SignalMode::TypeMix => {
            let mut next_subject = 0usize;
            for (i, &p) in target_ids.iter().enumerate() {
                let planted = corrupt(targets[i].label, spec, &mut rng);
                for &c in &planted {
                    let a = new_author(&mut b, &fg.one_hot(c), &mut rng)?;
                    b.add_edge(p, a, "writes")?;
                    let s = b.add_node(format!("s{next_subject}"), 2)?;
                    next_subject += 1;
                    b.set_features(s, &fg.row(&fg.complement(c), &mut rng))?;
                    b.add_edge(p, s, "about")?;
                }
                targets[i].planted = planted;
            }
            let mut cited = std::collections::BTreeSet::new();
            for (i, &p) in target_ids.iter().enumerate() {
                let mut added = 0;
                while added < 2.min(n_targets - 1) {
                    let j = rng.random_range(0..n_targets);
                    if j == i || !cited.insert((i.min(j), i.max(j))) {
                        continue;
                    }
                    b.add_edge(p, target_ids[j], "cites")?;
                    added += 1;
                }
            }
        }
    }
    for t in 3..spec.num_types {
        for (i, &p) in target_ids.iter().enumerate() {
            let u = b.add_node(format!("x{t}_{i}"), t as u32)?;
            b.set_features(u, &fg.row(&zeros, &mut rng))?;
            b.add_edge(p, u, &format!("has_extra{t}"))?;
        }
    }
    let g = b.build(BuildOptions::default())?;
    let manifest = SyntheticManifest {
        spec: spec.clone(),
        num_nodes: g.num_nodes(),
        num_edges: g.num_edges(),
        d_in: g.d_in(),
        targets,
    };
    Ok((g, manifest))
}

/// Sizes of a bibliographic graph shaped like the common ACM benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BibliographicSpec {
    pub papers: usize,
    pub authors: usize,
    pub subjects: usize,
    pub paper_author_edges: usize,
    pub d_in: usize,
    pub classes: usize,
    /// Scale of the class mean added to paper features.
    pub signal: f64,
    pub seed: u64,
}

impl Default for BibliographicSpec {
    fn default() -> Self {
        Self {
            papers: 4025,
            authors: 7167,
            subjects: 60,
            paper_author_edges: 13407,
            d_in: 128,
            classes: 3,
            signal: 0.12,
            seed: 0,
        }
    }
}

/// Paper/author/subject graph with class-dependent features and homophilous
/// links. Every paper has at least one author and exactly one subject; every
/// author has at least one paper.
pub fn generate_bibliographic(spec: &BibliographicSpec) -> Result<HinGraph, EvalError> {
    let BibliographicSpec {
        papers,
        authors,
        subjects,
        paper_author_edges,
        d_in,
        classes,
        signal,
        seed,
    } = *spec;
    if papers == 0 || authors == 0 || subjects == 0 || classes < 2 || d_in == 0 {
        return Err(EvalError::Input("all sizes must be positive and classes >= 2".into()));
    }
    if paper_author_edges < papers + authors || paper_author_edges > papers * authors
    {
        return Err(EvalError::Input(format!(
            "paper_author_edges = {paper_author_edges} cannot cover {papers} papers and {authors} authors"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d_in).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let row = |c: Option<usize>, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..d_in)
            .map(|j| (normal.sample(rng) + c.map_or(0.0, |c| scale * means[c][j])) as f32)
            .collect()
    };
    let mut b = GraphBuilder::new(["paper", "author", "subject"], d_in).with_target_type(0);
    let paper_class: Vec<usize> = (0..papers).map(|_| rng.random_range(0..classes)).collect();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in paper_class.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut p_ids = Vec::with_capacity(papers);
    for (i, &c) in paper_class.iter().enumerate() {
        let u = b.add_node(format!("p{i}"), 0)?;
        b.set_features(u, &row(Some(c), signal, &mut rng))?;
        b.set_label(u, c as u32)?;
        p_ids.push(u);
    }
    let author_class: Vec<usize> = (0..authors).map(|_| rng.random_range(0..classes)).collect();
    let mut a_ids = Vec::with_capacity(authors);
    for (i, &c) in author_class.iter().enumerate() {
        let u = b.add_node(format!("a{i}"), 1)?;
        b.set_features(u, &row(Some(c), 0.5 * signal, &mut rng))?;
        a_ids.push(u);
    }
    let mut s_ids = Vec::with_capacity(subjects);
    for i in 0..subjects {
        let u = b.add_node(format!("s{i}"), 2)?;
        b.set_features(u, &row(Some(i % classes), 0.5 * signal, &mut rng))?;
        s_ids.push(u);
    }
    let pick_paper = |c: usize, rng: &mut ChaCha8Rng| -> usize {
        if rng.random::<f64>() < 0.8 && !by_class[c].is_empty() {
            by_class[c][rng.random_range(0..by_class[c].len())]
        } else {
            rng.random_range(0..papers)
        }
    };
    let mut pairs = std::collections::BTreeSet::new();
    for a in 0..authors {
        let p = pick_paper(author_class[a], &mut rng);
        pairs.insert((p, a));
    }
    let mut has_author = vec![false; papers];
    for &(p, _) in &pairs {
        has_author[p] = true;
    }
    for p in 0..papers {
        if !has_author[p] {
            let a = rng.random_range(0..authors);
            pairs.insert((p, a));
        }
    }
    while pairs.len() < paper_author_edges {
        let a = rng.random_range(0..authors);
        let p = pick_paper(author_class[a], &mut rng);
        pairs.insert((p, a));
    }
    for &(p, a) in &pairs {
        b.add_edge(p_ids[p], a_ids[a], "paper-author")?;
    }
    for (p, &c) in paper_class.iter().enumerate() {
        let s = if rng.random::<f64>() < 0.7 {
            let same: Vec<usize> = (c..subjects).step_by(classes).collect();
            same[rng.random_range(0..same.len())]
        } else {
            rng.random_range(0..subjects)
        };
        b.add_edge(p_ids[p], s_ids[s], "paper-subject")?;
    }
    Ok(b.build(BuildOptions::default())?)
}

/// Writes the graph files plus `manifest.json` into `dir`.
pub fn write_synthetic(g: &HinGraph, manifest: &SyntheticManifest, dir: &Path) -> Result<(), EvalError> {
    save_graph_dir(g, dir, false)?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json).map_err(|source| EvalError::Io { path, source })
}
