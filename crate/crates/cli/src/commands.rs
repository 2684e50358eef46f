use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use ringformer::embeddings::{join_labels, read_labels, EmbeddingError, Embeddings};
use ringformer::eval::kmeans::cluster_eval;
use ringformer::eval::probe::{linear_probe, ProbeConfig, ProbeKind};
use ringformer::eval::report::EvalReport;
use ringformer::eval::synthetic::{
    generate_bibliographic, generate_synthetic_hin, write_synthetic, BibliographicSpec, SignalMode, SyntheticSpec,
};
use ringformer::eval::EvalError;
use ringformer::graph::{load_graph_dir, save_graph_dir, BuildOptions, GraphError, HinGraph};
use ringformer::model::{ModelConfig, ModelError, RingTypeTransformer};
use ringformer::rings::{load_or_precompute, CacheScope, RingError, TokenCache};
use ringformer::train::{history_csv, TrainConfig, TrainError, Trainer};
use ringformer::Scalar;

use crate::manifest::{hex, RunManifest};
use crate::{
    EmbFormat, EmbedArgs, EvalCommand, GenKind, GenerateArgs, GraphArgs, Precision, PreprocessArgs, ProbeArg,
    ScopeArg, TrainArgs, ValidateArgs,
};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub const SEED_ENV: &str = "RINGFORMER_SEED";
pub const CACHE_FILE: &str = "tokens.cache";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MODEL_JSON: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Bad arguments or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() || cause.is::<serde_json::Error>() {
            return EXIT_USAGE;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::Diverged { .. } => EXIT_NUMERIC,
                TrainError::Config(_) => EXIT_USAGE,
                _ => continue,
            };
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return match m {
                ModelError::NonFinite(_) => EXIT_NUMERIC,
                ModelError::Config(_) | ModelError::Json(_) => EXIT_USAGE,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.is::<GraphError>()
            || cause.is::<RingError>()
            || cause.is::<EmbeddingError>()
            || cause.is::<EvalError>()
            || cause.is::<std::io::Error>()
        {
            return EXIT_VALIDATION;
        }
    }
    1
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(0))
}

fn load_graph(args: &GraphArgs) -> anyhow::Result<HinGraph> {
    let opts = BuildOptions {
        allow_self_loops: args.allow_self_loops,
    };
    load_graph_dir(&args.graph, opts).with_context(|| format!("loading graph from {}", args.graph.display()))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn validate(a: &ValidateArgs) -> anyhow::Result<()> {
    let g = load_graph(&a.graph)?;
    println!("{}", g.summary());
    println!("fingerprint {}", hex(g.fingerprint()));
    Ok(())
}

fn scope_of(s: ScopeArg) -> CacheScope {
    match s {
        ScopeArg::Target => CacheScope::TargetType,
        ScopeArg::All => CacheScope::AllNodes,
    }
}

pub fn preprocess(a: &PreprocessArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start("preprocess");
    let g = load_graph(&a.graph)?;
    ensure_dir(&a.out)?;
    let path = a.out.join(CACHE_FILE);
    let cache = load_or_precompute(&g, a.k, scope_of(a.scope), &path)?;
    m.config = serde_json::json!({ "K": a.k, "scope": format!("{:?}", cache.scope()) });
    m.inputs.push(absolute(&a.graph.graph));
    m.artifacts.push(absolute(&path));
    m.graph_fingerprint = Some(hex(g.fingerprint()));
    m.cache_fingerprint = Some(hex(cache.fingerprint()));
    m.write(&a.out)?;
    println!("{} token tensors (K = {}, T = {}) -> {}", cache.len(), a.k, cache.num_types(), path.display());
    Ok(())
}

/// Training configuration file. Both sections are optional and partial.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn section_has(raw: &serde_json::Value, section: &str, key: &str) -> bool {
    raw.get(section).and_then(|s| s.get(key)).is_some()
}

/// Defaults, then the config file, then flags. Graph-derived shapes always
/// come from the graph.
fn effective_config(a: &TrainArgs, g: &HinGraph) -> anyhow::Result<RunConfig> {
    let (mut cfg, raw) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut raw: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if raw.get("tool").is_some() {
                let config = raw.get("config").cloned().unwrap_or_default();
                raw = serde_json::json!({
                    "model": config.get("model").cloned().unwrap_or_default(),
                    "train": config.get("train").cloned().unwrap_or_default(),
                });
            }
            let cfg: RunConfig =
                serde_json::from_value(raw.clone()).with_context(|| format!("parsing {}", path.display()))?;
            (cfg, raw)
        }
        None => (RunConfig::default(), serde_json::Value::Null),
    };
    let m = &mut cfg.model;
    let t = &mut cfg.train;
    macro_rules! set {
        ($dst:expr, $flag:expr) => {
            if let Some(v) = $flag {
                $dst = v;
            }
        };
    }
    set!(m.k, a.k);
    set!(m.d, a.d);
    set!(m.heads, a.heads);
    set!(m.type_layers, a.type_layers);
    set!(m.ring_layers, a.ring_layers);
    set!(m.dropout, a.dropout);
    set!(m.attn_dropout, a.attn_dropout);
    set!(m.ff_mult, a.ff_mult);
    set!(m.variant, a.variant);
    set!(m.mask_empty, a.mask_empty);
    set!(m.per_ring_type_encoder, a.per_ring_type_encoder);
    set!(t.lr, a.lr);
    set!(t.weight_decay, a.weight_decay);
    set!(t.epochs, a.epochs);
    set!(t.batch_size, a.batch_size);
    set!(t.eval_every, a.eval_every);
    set!(t.patience, a.patience);
    set!(t.val_fraction, a.val_fraction);
    let fallback = match a.seed {
        Some(s) => Some((s, true)),
        None => env_seed()?.map(|s| (s, false)),
    };
    if let Some((s, forced)) = fallback {
        if forced || !section_has(&raw, "model", "seed") {
            m.seed = s;
        }
        if forced || !section_has(&raw, "train", "seed") {
            t.seed = s;
        }
    }
    for (name, file_value, graph_value) in [
        ("num_types", m.num_types, g.num_types()),
        ("d_in", m.d_in, g.d_in()),
    ] {
        if section_has(&raw, "model", name) && file_value != graph_value {
            return Err(usage(format!("config model.{name} = {file_value} but the graph has {graph_value}")));
        }
    }
    m.num_types = g.num_types();
    m.d_in = g.d_in();
    if !section_has(&raw, "model", "num_classes") {
        m.num_classes = g.num_classes();
    }
    if g.num_classes() == 0 {
        return Err(usage("graph has no labels; training needs labels.csv"));
    }
    m.validate()?;
    t.validate()?;
    Ok(cfg)
}

fn check_cache(cache: &TokenCache, g: &HinGraph, cfg: &ModelConfig) -> anyhow::Result<()> {
    let mut diffs = Vec::new();
    if cache.k() != cfg.k {
        diffs.push(format!("K: cache {} vs config {}", cache.k(), cfg.k));
    }
    if cache.num_types() != cfg.num_types {
        diffs.push(format!("T: cache {} vs config {}", cache.num_types(), cfg.num_types));
    }
    if cache.d_in() != cfg.d_in {
        diffs.push(format!("d_in: cache {} vs config {}", cache.d_in(), cfg.d_in));
    }
    if cache.fingerprint() != g.fingerprint() {
        diffs.push(format!(
            "graph fingerprint: cache {} vs graph {}",
            hex(cache.fingerprint()),
            hex(g.fingerprint())
        ));
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(RingError::Stale(diffs.join("; "))))
    }
}

fn open_cache(explicit: Option<&Path>, fallback: &Path, g: &HinGraph, cfg: &ModelConfig) -> anyhow::Result<(TokenCache, PathBuf)> {
    match explicit {
        Some(path) => {
            let cache = TokenCache::read(path)?;
            check_cache(&cache, g, cfg).with_context(|| format!("token cache {} does not fit", path.display()))?;
            Ok((cache, path.to_path_buf()))
        }
        None => Ok((load_or_precompute(g, cfg.k, CacheScope::TargetType, fallback)?, fallback.to_path_buf())),
    }
}

fn fit_and_save<S: Scalar>(g: &HinGraph, cache: &TokenCache, cfg: &RunConfig, out: &Path) -> anyhow::Result<(usize, f64)> {
    let outcome = Trainer::<S>::new(g, cache, cfg.model.clone(), cfg.train.clone())?.fit()?;
    fs::write(out.join(HISTORY_FILE), history_csv(&outcome.history))?;
    outcome.model.save(&out.join(CHECKPOINT_FILE), &out.join(MODEL_JSON))?;
    let best = outcome
        .history
        .iter()
        .find(|h| h.epoch == outcome.best_epoch)
        .and_then(|h| h.val_micro_f1)
        .unwrap_or(f64::NAN);
    Ok((outcome.best_epoch, best))
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start("train");
    let g = load_graph(&a.graph)?;
    let cfg = effective_config(a, &g)?;
    ensure_dir(&a.out)?;
    let (cache, cache_path) = open_cache(a.cache.as_deref(), &a.out.join(CACHE_FILE), &g, &cfg.model)?;
    fs::write(a.out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
    let (best_epoch, best_f1) = match a.precision {
        Precision::F32 => fit_and_save::<f32>(&g, &cache, &cfg, &a.out)?,
        Precision::F64 => fit_and_save::<f64>(&g, &cache, &cfg, &a.out)?,
    };
    m.config = serde_json::json!({
        "model": cfg.model,
        "train": cfg.train,
        "precision": format!("{:?}", a.precision).to_lowercase(),
        "graph": absolute(&a.graph.graph),
        "allow_self_loops": a.graph.allow_self_loops,
        "cache": absolute(&cache_path),
    });
    m.inputs.push(absolute(&a.graph.graph));
    m.inputs.push(absolute(&cache_path));
    for f in [CONFIG_FILE, HISTORY_FILE, CHECKPOINT_FILE, MODEL_JSON] {
        m.artifacts.push(absolute(&a.out.join(f)));
    }
    m.graph_fingerprint = Some(hex(g.fingerprint()));
    m.cache_fingerprint = Some(hex(cache.fingerprint()));
    m.seeds = vec![cfg.model.seed, cfg.train.seed];
    m.write(&a.out)?;
    println!("best epoch {best_epoch}, val micro-F1 {best_f1:.4}; run written to {}", a.out.display());
    Ok(())
}

fn embed_with<S: Scalar>(run: &Path, cache: &TokenCache, g: &HinGraph) -> anyhow::Result<Embeddings> {
    let model = RingTypeTransformer::<S>::load(&run.join(CHECKPOINT_FILE), &run.join(MODEL_JSON))?;
    check_cache(cache, g, model.config())?;
    let nodes: Vec<_> = cache
        .nodes()
        .into_iter()
        .filter(|&u| Some(g.node_type(u)) == g.target_type())
        .collect();
    let toks: Vec<_> = nodes.iter().map(|&u| cache.get(u).expect("cached")).collect();
    let (z, _) = model.embed_batch(&toks)?;
    let dim = model.embedding_dim();
    let values = z.into_iter().flatten().map(|v| v.to_f64_lossy() as f32).collect();
    let ids = nodes.iter().map(|&u| g.node_name(u).to_string()).collect();
    Ok(Embeddings::new(ids, dim, values))
}

pub fn embed(a: &EmbedArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start("embed");
    let trained = RunManifest::read(&a.run, "train").context("embed needs a run directory written by `train`")?;
    let recorded = |key: &str| trained.config.get(key).and_then(|v| v.as_str()).map(PathBuf::from);
    let graph_dir = a
        .graph
        .clone()
        .or_else(|| recorded("graph"))
        .ok_or_else(|| usage("no --graph given and none recorded in the run"))?;
    let allow_self_loops = trained.config.get("allow_self_loops").and_then(|v| v.as_bool()).unwrap_or(false);
    let g = load_graph(&GraphArgs {
        graph: graph_dir.clone(),
        allow_self_loops,
    })?;
    let cache_path = a
        .cache
        .clone()
        .or_else(|| recorded("cache"))
        .unwrap_or_else(|| a.run.join(CACHE_FILE));
    let cache = TokenCache::read(&cache_path)?;
    let emb = match a.precision {
        Precision::F32 => embed_with::<f32>(&a.run, &cache, &g)?,
        Precision::F64 => embed_with::<f64>(&a.run, &cache, &g)?,
    };
    let out = a.out.clone().unwrap_or_else(|| a.run.join("embeddings.bin"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let format = a.format.unwrap_or(if out.extension().is_some_and(|e| e == "csv") {
        EmbFormat::Csv
    } else {
        EmbFormat::Bin
    });
    match format {
        EmbFormat::Bin => emb.write_bin(&out)?,
        EmbFormat::Csv => emb.write_csv(&out)?,
    }
    m.config = serde_json::json!({ "run": absolute(&a.run), "format": format!("{format:?}").to_lowercase() });
    m.inputs = vec![absolute(&a.run), absolute(&graph_dir), absolute(&cache_path)];
    m.artifacts.push(absolute(&out));
    m.graph_fingerprint = Some(hex(g.fingerprint()));
    m.cache_fingerprint = Some(hex(cache.fingerprint()));
    m.seeds = trained.seeds;
    let manifest_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    m.write(manifest_dir)?;
    println!("{} embeddings of dimension {} -> {}", emb.len(), emb.dim, out.display());
    Ok(())
}

pub fn eval(c: &EvalCommand) -> anyhow::Result<()> {
    let common = match c {
        EvalCommand::Classify { common, .. } | EvalCommand::Cluster { common } => common,
    };
    let mut m = RunManifest::start(match c {
        EvalCommand::Classify { .. } => "eval-classify",
        EvalCommand::Cluster { .. } => "eval-cluster",
    });
    if common.repeats == 0 {
        return Err(usage("--repeats must be positive"));
    }
    let seed = resolve_seed(common.seed)?;
    let emb = Embeddings::read(&common.embeddings)?;
    let labels = read_labels(&common.labels)?;
    let (ids, x, y) = join_labels(&emb, &labels);
    if ids.len() < 2 {
        bail!(EvalError::Input(format!(
            "only {} embedded nodes have labels in {}",
            ids.len(),
            common.labels.display()
        )));
    }
    let report = match c {
        EvalCommand::Classify { probe, train_frac, .. } => {
            let kind = match probe {
                ProbeArg::Svm => ProbeKind::Svm,
                ProbeArg::Logreg => ProbeKind::LogReg,
            };
            let cfg = ProbeConfig {
                kind,
                train_frac: *train_frac,
                repeats: common.repeats,
                seed,
                ..ProbeConfig::default()
            };
            m.config = serde_json::to_value(&cfg)?;
            let runs = linear_probe(&x, &y, &cfg)?;
            EvalReport::classification(&common.method, ids.len(), kind, *train_frac, runs)
        }
        EvalCommand::Cluster { .. } => {
            let runs = cluster_eval(&x, &y, common.repeats, seed)?;
            let mut k = y.clone();
            k.sort_unstable();
            k.dedup();
            m.config = serde_json::json!({ "repeats": common.repeats, "seed": seed, "k": k.len() });
            EvalReport::clustering(&common.method, ids.len(), k.len(), runs)
        }
    };
    print!("{}", report.table());
    if let Some(out) = &common.out {
        ensure_dir(out)?;
        fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        fs::write(out.join("table.txt"), report.table())?;
        m.inputs = vec![absolute(&common.embeddings), absolute(&common.labels)];
        m.artifacts = vec![absolute(&out.join("report.json")), absolute(&out.join("table.txt"))];
        m.seeds = report.seeds.clone();
        m.write(out)?;
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start("generate");
    let seed = resolve_seed(a.seed)?;
    ensure_dir(&a.out)?;
    let g = match a.kind {
        GenKind::Bibliographic => {
            let spec = BibliographicSpec {
                classes: a.classes,
                seed,
                ..BibliographicSpec::default()
            };
            m.config = serde_json::to_value(&spec)?;
            let g = generate_bibliographic(&spec)?;
            save_graph_dir(&g, &a.out, a.csv_features)?;
            g
        }
        GenKind::RingDistance | GenKind::TypeMix => {
            let signal = match a.kind {
                GenKind::RingDistance => SignalMode::RingDistance,
                _ => SignalMode::TypeMix,
            };
            let spec = SyntheticSpec {
                num_types: a.types,
                noise: a.noise,
                ..SyntheticSpec::new(signal, a.classes, a.per_class, seed)
            };
            m.config = serde_json::to_value(&spec)?;
            let (g, manifest) = generate_synthetic_hin(&spec)?;
            let bad = manifest.self_check();
            if !bad.is_empty() {
                bail!(EvalError::Input(format!("{} targets fail the planted-signal check", bad.len())));
            }
            write_synthetic(&g, &manifest, &a.out)?;
            if a.csv_features {
                save_graph_dir(&g, &a.out, true)?;
            }
            m.artifacts.push(absolute(&a.out.join("manifest.json")));
            g
        }
    };
    m.graph_fingerprint = Some(hex(g.fingerprint()));
    m.seeds = vec![seed];
    m.artifacts.push(absolute(&a.out));
    m.write(&a.out)?;
    println!("{}", g.summary());
    Ok(())
}
