//! Tab-separated loaders and writers for graph data.
//!
//! Formats: edge files carry one `src<TAB>dst` line per edge, one file per
//! view; the feature file carries `node_id<TAB>v1,...,vd`; the role file
//! carries `node_id<TAB>{user|item|attr}`; the persisted id map carries
//! `original_id<TAB>dense_id`. Node ids may be arbitrary non-negative
//! integers and are densely re-indexed in ascending order.

use super::{GraphError, Instance, MultiViewGraph, NodeRole};
use crate::autodiff::Matrix;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// A loaded graph together with the dense re-indexing map
/// (`id_map[dense] = original`).
#[derive(Debug, Clone)]
pub struct LoadedGraph {
    pub graph: MultiViewGraph,
    pub id_map: Vec<u64>,
}

impl LoadedGraph {
    pub fn dense_of(&self, original: u64) -> Option<usize> {
        self.id_map.binary_search(&original).ok()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, GraphError> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(text.lines().map(str::to_string).collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn split_tab<'a>(
    path: &Path,
    lineno: usize,
    line: &'a str,
    what: &str,
) -> Result<(&'a str, &'a str), GraphError> {
    line.split_once('\t')
        .ok_or_else(|| parse_err(path, lineno, format!("expected '{what}' separated by a tab")))
}

fn parse_id(path: &Path, lineno: usize, field: &str) -> Result<u64, GraphError> {
    field
        .trim()
        .parse::<u64>()
        .map_err(|e| parse_err(path, lineno, format!("invalid node id '{field}': {e}")))
}

/// Loads a multi-view graph from one edge file per view plus feature and role
/// files. The role file defines the node universe; every node must have
/// exactly one role line and one feature line, and every edge endpoint must
/// be a known node.
pub fn load_multiview_graph(
    edge_paths: &[impl AsRef<Path>],
    feature_path: impl AsRef<Path>,
    role_path: impl AsRef<Path>,
) -> Result<LoadedGraph, GraphError> {
    let role_path = role_path.as_ref();
    let feature_path = feature_path.as_ref();

    // roles define the universe
    let mut roles_by_id: BTreeMap<u64, NodeRole> = BTreeMap::new();
    for (idx, line) in read_lines(role_path)?.iter().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let (id_field, role_field) = split_tab(role_path, lineno, line, "node_id<TAB>role")?;
        let id = parse_id(role_path, lineno, id_field)?;
        let role: NodeRole = role_field
            .trim()
            .parse()
            .map_err(|e: String| parse_err(role_path, lineno, e))?;
        if roles_by_id.insert(id, role).is_some() {
            return Err(parse_err(role_path, lineno, format!("duplicate node id {id}")));
        }
    }
    let id_map: Vec<u64> = roles_by_id.keys().copied().collect();
    let n = id_map.len();
    let dense_of = |id: u64| id_map.binary_search(&id).ok();

    // features
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut dim: Option<usize> = None;
    for (idx, line) in read_lines(feature_path)?.iter().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let (id_field, vec_field) =
            split_tab(feature_path, lineno, line, "node_id<TAB>v1,...,vd")?;
        let id = parse_id(feature_path, lineno, id_field)?;
        let dense = dense_of(id)
            .ok_or_else(|| parse_err(feature_path, lineno, format!("unknown node id {id}")))?;
        let values: Vec<f64> = vec_field
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(feature_path, lineno, format!("invalid float '{v}': {e}")))
            })
            .collect::<Result<_, _>>()?;
        if values.is_empty() {
            return Err(parse_err(feature_path, lineno, "empty feature vector"));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(
                    feature_path,
                    lineno,
                    format!("feature dimension {} differs from {}", values.len(), d),
                ));
            }
            _ => {}
        }
        if rows[dense].replace(values).is_some() {
            return Err(parse_err(
                feature_path,
                lineno,
                format!("duplicate feature row for node {id}"),
            ));
        }
    }
    let d = dim.ok_or_else(|| parse_err(feature_path, 0, "feature file is empty"))?;
    let mut features = Matrix::zeros((n, d));
    for (dense, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| {
            parse_err(
                feature_path,
                0,
                format!("missing feature row for node {}", id_map[dense]),
            )
        })?;
        for (c, v) in row.into_iter().enumerate() {
            features[(dense, c)] = v;
        }
    }

    // edges, one file per view, in flag order
    let mut views = Vec::with_capacity(edge_paths.len());
    for (view, path) in edge_paths.iter().enumerate() {
        let path = path.as_ref();
        let mut edges = Vec::new();
        for (idx, line) in read_lines(path)?.iter().enumerate() {
            let lineno = idx + 1;
            if line.is_empty() {
                continue;
            }
            let (src_field, dst_field) = split_tab(path, lineno, line, "src<TAB>dst")?;
            let src = parse_id(path, lineno, src_field)?;
            let dst = parse_id(path, lineno, dst_field)?;
            let s = dense_of(src).ok_or_else(|| {
                parse_err(path, lineno, format!("edge references unknown node {src}"))
            })?;
            let t = dense_of(dst).ok_or_else(|| {
                parse_err(path, lineno, format!("edge references unknown node {dst}"))
            })?;
            edges.push((s, t));
        }
        let _ = view;
        views.push(edges);
    }

    let roles: Vec<NodeRole> = roles_by_id.values().copied().collect();
    let graph = MultiViewGraph::new(n, roles, views, features)?;
    Ok(LoadedGraph { graph, id_map })
}

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes edge/feature/role/id-map files for a graph whose node ids are
/// already dense. Returns the written edge file paths in view order.
pub fn write_graph_files(
    dir: impl AsRef<Path>,
    graph: &MultiViewGraph,
) -> Result<Vec<std::path::PathBuf>, GraphError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let mut edge_paths = Vec::new();
    for k in 0..graph.view_count() {
        let path = dir.join(format!("edges_view{k}.tsv"));
        let mut out = String::new();
        for &(s, d) in graph.view_edges(k) {
            out.push_str(&format!("{s}\t{d}\n"));
        }
        fs::write(&path, out).map_err(|e| io_err(&path, e))?;
        edge_paths.push(path);
    }

    let path = dir.join("features.tsv");
    let mut out = String::new();
    for node in 0..graph.node_count() {
        let row: Vec<String> = graph
            .features()
            .row(node)
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        out.push_str(&format!("{node}\t{}\n", row.join(",")));
    }
    fs::write(&path, out).map_err(|e| io_err(&path, e))?;

    let path = dir.join("roles.tsv");
    let mut out = String::new();
    for node in 0..graph.node_count() {
        out.push_str(&format!("{node}\t{}\n", graph.role(node)));
    }
    fs::write(&path, out).map_err(|e| io_err(&path, e))?;

    let path = dir.join("id_map.tsv");
    let mut out = String::new();
    for node in 0..graph.node_count() {
        out.push_str(&format!("{node}\t{node}\n"));
    }
    fs::write(&path, out).map_err(|e| io_err(&path, e))?;

    Ok(edge_paths)
}

/// Writes instances as `user<TAB>item<TAB>label<TAB>planted_friend` with `-`
/// for instances that were not planted.
pub fn write_instances(
    path: impl AsRef<Path>,
    instances: &[Instance],
) -> Result<(), GraphError> {
    let path = path.as_ref();
    let mut out = String::new();
    for inst in instances {
        let friend = inst
            .planted_friend
            .map_or_else(|| "-".to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            inst.user, inst.item, inst.label, friend
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn load_instances(
    path: impl AsRef<Path>,
    node_count: usize,
) -> Result<Vec<Instance>, GraphError> {
    let path = path.as_ref();
    let mut instances = Vec::new();
    for (idx, line) in read_lines(path)?.iter().enumerate() {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_err(
                path,
                lineno,
                "expected user<TAB>item<TAB>label[<TAB>planted_friend]",
            ));
        }
        let user = parse_id(path, lineno, fields[0])? as usize;
        let item = parse_id(path, lineno, fields[1])? as usize;
        let label: u8 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, lineno, format!("invalid label: {e}")))?;
        if label > 1 {
            return Err(parse_err(path, lineno, format!("label must be 0 or 1, got {label}")));
        }
        for node in [user, item] {
            if node >= node_count {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("node {node} outside [0, {node_count})"),
                ));
            }
        }
        let planted_friend = match fields.get(3).map(|s| s.trim()) {
            None | Some("-") | Some("") => None,
            Some(v) => Some(parse_id(path, lineno, v)? as usize),
        };
        let mut inst = Instance::new(user, item, label);
        inst.planted_friend = planted_friend;
        instances.push(inst);
    }
    Ok(instances)
}
