//! On-disk graph formats.
//!
//! A graph directory holds:
//!
//! * `nodes.csv`: first line `#hin-nodes v1 types=<name>:<count>,...`
//!   declaring the type order and per-type counts, then a CSV header
//!   `node_id,type_name` and one row per node.
//! * `edges.csv`: optional first line `#hin-edges v1 relations=<name>,...`
//!   fixing the relation id order, then `src,dst,relation_name` rows with
//!   original node ids. Edges are undirected.
//! * `features.bin` (or `features.csv`): binary: `HINF`, `|V|: u64`,
//!   `d_in: u32`, then `f32` row-major in node-file order. CSV: header
//!   `node_id,f0,...` with one row per node.
//! * `labels.csv`: optional, `node_id,class_id`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{BuildOptions, GraphBuilder, GraphError, HinGraph};

pub const NODES_HEADER_TAG: &str = "#hin-nodes v1";
const EDGES_HEADER_TAG: &str = "#hin-edges v1";
pub const FEATURES_MAGIC: &[u8; 4] = b"HINF";

/// Paths of the four input files.
#[derive(Clone, Debug)]
pub struct GraphFiles {
    pub nodes: PathBuf,
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: Option<PathBuf>,
}

impl GraphFiles {
    /// Resolves the conventional file names inside a graph directory,
    /// preferring `features.bin` over `features.csv`.
    pub fn in_dir(dir: &Path) -> Self {
        let bin = dir.join("features.bin");
        let features = if bin.exists() { bin } else { dir.join("features.csv") };
        let labels = dir.join("labels.csv");
        Self {
            nodes: dir.join("nodes.csv"),
            edges: dir.join("edges.csv"),
            features,
            labels: labels.exists().then_some(labels),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Splits off a leading `#tag ...` line. Returns the tag payload and the
/// remaining text.
fn split_header_line<'a>(text: &'a str, tag: &str) -> (Option<&'a str>, &'a str) {
    if let Some(rest) = text.strip_prefix(tag) {
        let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
        (Some(line.trim()), body)
    } else {
        (None, text)
    }
}

fn csv_reader(body: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(body.as_bytes())
}

fn expect_headers(
    path: &Path,
    rdr: &mut csv::Reader<&[u8]>,
    line_offset: u64,
    expected: &[&str],
) -> Result<(), GraphError> {
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, line_offset + 1, e.to_string()))?;
    if headers.len() < expected.len() || expected.iter().zip(headers.iter()).any(|(a, b)| *a != b) {
        return Err(parse_err(
            path,
            line_offset + 1,
            format!("expected header {:?}, got {:?}", expected.join(","), headers.iter().collect::<Vec<_>>()),
        ));
    }
    Ok(())
}

fn record_line(rec: &csv::StringRecord, line_offset: u64) -> u64 {
    rec.position().map_or(0, |p| p.line()) + line_offset
}

/// Loads and validates a graph from explicit file paths.
pub fn load_graph(files: &GraphFiles, opts: BuildOptions) -> Result<HinGraph, GraphError> {
    let nodes_text = fs::read_to_string(&files.nodes).map_err(io_err(&files.nodes))?;
    let (decl, body) = split_header_line(&nodes_text, NODES_HEADER_TAG);
    let decl = decl.ok_or_else(|| {
        parse_err(&files.nodes, 1, format!("missing `{NODES_HEADER_TAG} types=...` header line"))
    })?;
    let declared = parse_type_declaration(&files.nodes, decl)?;

    let d_in_hint = peek_feature_dim(&files.features)?;
    let mut builder = GraphBuilder::new(declared.iter().map(|(n, _)| n.clone()), d_in_hint);

    let mut rdr = csv_reader(body);
    expect_headers(&files.nodes, &mut rdr, 1, &["node_id", "type_name"])?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&files.nodes, 0, e.to_string()))?;
        let line = record_line(&rec, 1);
        if rec.len() != 2 {
            return Err(parse_err(&files.nodes, line, format!("expected 2 fields, got {}", rec.len())));
        }
        let t = builder
            .type_id(&rec[1])
            .ok_or_else(|| parse_err(&files.nodes, line, format!("undeclared type {:?}", &rec[1])))?;
        builder
            .add_node(&rec[0], t)
            .map_err(|e| parse_err(&files.nodes, line, e.to_string()))?;
    }

    let edges_text = fs::read_to_string(&files.edges).map_err(io_err(&files.edges))?;
    let (rel_decl, body) = split_header_line(&edges_text, EDGES_HEADER_TAG);
    let offset = u64::from(rel_decl.is_some());
    if let Some(decl) = rel_decl {
        let list = decl
            .strip_prefix("relations=")
            .ok_or_else(|| parse_err(&files.edges, 1, "expected `relations=` declaration"))?;
        builder = builder.with_relations(list.split(',').filter(|s| !s.is_empty()));
    }
    let mut rdr = csv_reader(body);
    expect_headers(&files.edges, &mut rdr, offset, &["src", "dst", "relation_name"])?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(&files.edges, 0, e.to_string()))?;
        let line = record_line(&rec, offset);
        if rec.len() != 3 {
            return Err(parse_err(&files.edges, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let u = builder.node_id(&rec[0]).ok_or_else(|| {
            GraphError::Validation(format!("{}:{line}: dangling edge endpoint {:?}", files.edges.display(), &rec[0]))
        })?;
        let v = builder.node_id(&rec[1]).ok_or_else(|| {
            GraphError::Validation(format!("{}:{line}: dangling edge endpoint {:?}", files.edges.display(), &rec[1]))
        })?;
        builder.add_edge(u, v, &rec[2])?;
    }

    load_features(&files.features, &mut builder)?;

    if let Some(labels) = &files.labels {
        let text = fs::read_to_string(labels).map_err(io_err(labels))?;
        let mut rdr = csv_reader(&text);
        expect_headers(labels, &mut rdr, 0, &["node_id", "class_id"])?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| parse_err(labels, 0, e.to_string()))?;
            let line = record_line(&rec, 0);
            if rec.len() != 2 {
                return Err(parse_err(labels, line, format!("expected 2 fields, got {}", rec.len())));
            }
            let u = builder.node_id(&rec[0]).ok_or_else(|| {
                GraphError::Validation(format!("{}:{line}: label for unknown node {:?}", labels.display(), &rec[0]))
            })?;
            let c: u32 = rec[1]
                .parse()
                .map_err(|_| parse_err(labels, line, format!("bad class id {:?}", &rec[1])))?;
            builder.set_label(u, c)?;
        }
    }

    let graph = builder.build(opts)?;
    let hist = graph.type_histogram();
    for ((name, declared_count), &actual) in declared.iter().zip(&hist) {
        if *declared_count != actual {
            return Err(GraphError::Validation(format!(
                "type {name}: header declares {declared_count} nodes, file has {actual}"
            )));
        }
    }
    log::info!("loaded graph: {}", graph.summary());
    Ok(graph)
}

pub fn load_graph_dir(dir: &Path, opts: BuildOptions) -> Result<HinGraph, GraphError> {
    load_graph(&GraphFiles::in_dir(dir), opts)
}

fn parse_type_declaration(path: &Path, decl: &str) -> Result<Vec<(String, usize)>, GraphError> {
    let list = decl
        .strip_prefix("types=")
        .ok_or_else(|| parse_err(path, 1, "expected `types=` declaration"))?;
    let mut out = Vec::new();
    for item in list.split(',').filter(|s| !s.is_empty()) {
        let (name, count) = item
            .split_once(':')
            .ok_or_else(|| parse_err(path, 1, format!("bad type declaration {item:?}")))?;
        let count = count
            .parse()
            .map_err(|_| parse_err(path, 1, format!("bad type count {count:?}")))?;
        if out.iter().any(|(n, _)| n == name) {
            return Err(parse_err(path, 1, format!("type {name:?} declared twice")));
        }
        out.push((name.to_string(), count));
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "no node types declared"));
    }
    Ok(out)
}

fn is_binary_features(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn peek_feature_dim(path: &Path) -> Result<usize, GraphError> {
    if is_binary_features(path) {
        let mut f = File::open(path).map_err(io_err(path))?;
        let mut head = [0u8; 16];
        f.read_exact(&mut head).map_err(io_err(path))?;
        if &head[..4] != FEATURES_MAGIC {
            return Err(parse_err(path, 0, "bad feature magic"));
        }
        Ok(u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize)
    } else {
        let f = File::open(path).map_err(io_err(path))?;
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(BufReader::new(f));
        let headers = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
        if headers.is_empty() || &headers[0] != "node_id" {
            return Err(parse_err(path, 1, "feature CSV header must start with node_id"));
        }
        Ok(headers.len() - 1)
    }
}

fn load_features(path: &Path, builder: &mut GraphBuilder) -> Result<(), GraphError> {
    if is_binary_features(path) {
        let (rows, d, data) = read_features_bin(path)?;
        if rows != builder.num_nodes() {
            return Err(GraphError::Validation(format!(
                "{}: {rows} feature rows for {} nodes",
                path.display(),
                builder.num_nodes()
            )));
        }
        for u in 0..rows {
            builder.set_features(u as u32, &data[u * d..(u + 1) * d])?;
        }
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rdr = csv_reader(&text);
    let width = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.len();
    let mut row = Vec::with_capacity(width.saturating_sub(1));
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(path, 0, e.to_string()))?;
        let line = record_line(&rec, 0);
        if rec.len() != width {
            return Err(GraphError::Validation(format!(
                "{}:{line}: feature row has {} values, expected {}",
                path.display(),
                rec.len().saturating_sub(1),
                width - 1
            )));
        }
        let u = builder.node_id(&rec[0]).ok_or_else(|| {
            GraphError::Validation(format!("{}:{line}: features for unknown node {:?}", path.display(), &rec[0]))
        })?;
        row.clear();
        for field in rec.iter().skip(1) {
            row.push(
                field
                    .parse::<f32>()
                    .map_err(|_| parse_err(path, line, format!("bad feature value {field:?}")))?,
            );
        }
        builder.set_features(u, &row)?;
    }
    Ok(())
}

/// Reads a binary feature matrix: `(rows, d_in, row-major values)`.
pub fn read_features_bin(path: &Path) -> Result<(usize, usize, Vec<f32>), GraphError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURES_MAGIC {
        return Err(parse_err(path, 0, "bad feature magic"));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + rows * d * 4;
    if bytes.len() != expected {
        return Err(GraphError::Validation(format!(
            "{}: {} bytes, expected {expected} for {rows} x {d}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((rows, d, data))
}

pub fn write_features_bin(path: &Path, rows: usize, d: usize, data: &[f32]) -> Result<(), GraphError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut write = |b: &[u8]| w.write_all(b).map_err(io_err(path));
    write(FEATURES_MAGIC)?;
    write(&(rows as u64).to_le_bytes())?;
    write(&(d as u32).to_le_bytes())?;
    for x in data {
        write(&x.to_le_bytes())?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes a graph directory that [`load_graph_dir`] reads back to an equal
/// graph. Features are written in binary unless `csv_features` is set.
pub fn save_graph_dir(g: &HinGraph, dir: &Path, csv_features: bool) -> Result<(), GraphError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let nodes = dir.join("nodes.csv");
    let mut w = BufWriter::new(File::create(&nodes).map_err(io_err(&nodes))?);
    let decl = g
        .type_names()
        .iter()
        .zip(g.type_histogram())
        .map(|(n, c)| format!("{n}:{c}"))
        .collect::<Vec<_>>()
        .join(",");
    writeln!(w, "{NODES_HEADER_TAG} types={decl}").map_err(io_err(&nodes))?;
    writeln!(w, "node_id,type_name").map_err(io_err(&nodes))?;
    for u in 0..g.num_nodes() as u32 {
        writeln!(w, "{},{}", g.node_name(u), g.type_names()[g.node_type(u) as usize]).map_err(io_err(&nodes))?;
    }
    w.flush().map_err(io_err(&nodes))?;

    let edges = dir.join("edges.csv");
    let mut w = BufWriter::new(File::create(&edges).map_err(io_err(&edges))?);
    writeln!(w, "{EDGES_HEADER_TAG} relations={}", g.relation_names().join(",")).map_err(io_err(&edges))?;
    writeln!(w, "src,dst,relation_name").map_err(io_err(&edges))?;
    for (u, v, r) in g.edges() {
        writeln!(w, "{},{},{}", g.node_name(u), g.node_name(v), g.relation_names()[r as usize]).map_err(io_err(&edges))?;
    }
    w.flush().map_err(io_err(&edges))?;

    let stale = dir.join(if csv_features { "features.bin" } else { "features.csv" });
    if stale.exists() {
        fs::remove_file(&stale).map_err(io_err(&stale))?;
    }
    if csv_features {
        let path = dir.join("features.csv");
        let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        let header: Vec<String> = std::iter::once("node_id".to_string())
            .chain((0..g.d_in()).map(|j| format!("f{j}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io_err(&path))?;
        for u in 0..g.num_nodes() as u32 {
            let vals: Vec<String> = g.features(u).iter().map(|x| x.to_string()).collect();
            if vals.is_empty() {
                writeln!(w, "{}", g.node_name(u)).map_err(io_err(&path))?;
            } else {
                writeln!(w, "{},{}", g.node_name(u), vals.join(",")).map_err(io_err(&path))?;
            }
        }
        w.flush().map_err(io_err(&path))?;
    } else {
        write_features_bin(&dir.join("features.bin"), g.num_nodes(), g.d_in(), g.feature_matrix())?;
    }

    let labels = dir.join("labels.csv");
    if g.labels().iter().any(Option::is_some) {
        let mut w = BufWriter::new(File::create(&labels).map_err(io_err(&labels))?);
        writeln!(w, "node_id,class_id").map_err(io_err(&labels))?;
        for u in 0..g.num_nodes() as u32 {
            if let Some(c) = g.label(u) {
                writeln!(w, "{},{c}", g.node_name(u)).map_err(io_err(&labels))?;
            }
        }
        w.flush().map_err(io_err(&labels))?;
    } else if labels.exists() {
        fs::remove_file(&labels).map_err(io_err(&labels))?;
    }
    Ok(())
}
