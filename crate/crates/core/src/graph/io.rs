use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphData, GraphError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphFormat {
    /// `u<TAB>v` edge lines plus `id<TAB>label<TAB>f1,f2,...` node lines.
    #[default]
    EdgeListFeatures,
    /// LINQS citation layout: `id f1 ... fD class` content lines (class names
    /// are indexed in sorted order) plus whitespace-separated `cited citing`
    /// lines. `nodes` is the content file, `edges` the cites file.
    Linqs,
}

/// The two files making up an on-disk graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFiles {
    pub edges: PathBuf,
    pub nodes: PathBuf,
}

impl GraphFiles {
    pub fn new(edges: impl Into<PathBuf>, nodes: impl Into<PathBuf>) -> Self {
        Self {
            edges: edges.into(),
            nodes: nodes.into(),
        }
    }

    /// `<dir>/edges.tsv` and `<dir>/nodes.tsv`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self::new(dir.join("edges.tsv"), dir.join("nodes.tsv"))
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Reads a graph; nodes are ordered by ascending id and edges symmetrized.
pub fn load_graph(files: &GraphFiles, format: GraphFormat) -> Result<GraphData> {
    match format {
        GraphFormat::EdgeListFeatures => load_edge_list(files),
        GraphFormat::Linqs => load_linqs(files),
    }
}

fn assemble(rows: Vec<(usize, usize, Vec<f64>)>, d: usize, num_classes: usize, edge_file: &Path) -> Result<GraphData> {
    let mut rows = rows;
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(GraphError::Validation(format!("duplicate node id {}", w[0].0)));
    }
    let n = rows.len();
    let index: HashMap<usize, usize> = rows.iter().enumerate().map(|(i, r)| (r.0, i)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut node_ids = Vec::with_capacity(n);
    for (id, label, feats) in rows {
        node_ids.push(id);
        labels.push(label);
        data.extend(feats);
    }
    let features = Tensor::new(n, d, data).map_err(|e| GraphError::Validation(e.to_string()))?;
    let edges = read_edges(edge_file, &index)?;
    GraphData::new(features, edges, labels, num_classes, node_ids)
}

fn read_edges(path: &Path, index: &HashMap<usize, usize>) -> Result<Vec<(usize, usize)>> {
    let edge_path = path.display().to_string();
    let text = read(path)?;
    let mut edges = Vec::new();
    for (line, l) in content_lines(&text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(GraphError::Parse {
                path: edge_path.clone(),
                line,
                msg: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        let mut ends = [0usize; 2];
        for (slot, f) in ends.iter_mut().zip(&fields) {
            let id = f.parse::<usize>().map_err(|e| GraphError::Parse {
                path: edge_path.clone(),
                line,
                msg: format!("endpoint {f:?}: {e}"),
            })?;
            *slot = *index.get(&id).ok_or_else(|| {
                GraphError::Validation(format!("{edge_path}:{line}: dangling endpoint {id}"))
            })?;
        }
        edges.push((ends[0], ends[1]));
    }
    Ok(edges)
}

fn load_linqs(files: &GraphFiles) -> Result<GraphData> {
    let node_path = files.nodes.display().to_string();
    let text = read(&files.nodes)?;
    let parse_err = |line: usize, msg: String| GraphError::Parse {
        path: node_path.clone(),
        line,
        msg,
    };
    let mut raw: Vec<(usize, String, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (line, l) in content_lines(&text) {
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(parse_err(line, "expected an id and a class".into()));
        }
        let id = fields[0]
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("node id {:?}: {e}", fields[0])))?;
        let feats = fields[1..fields.len() - 1]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(line, format!("feature: {e}")))?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(parse_err(line, format!("{} features, expected {d}", feats.len())))
            }
            _ => {}
        }
        raw.push((id, fields[fields.len() - 1].to_string(), feats));
    }
    let mut classes: Vec<&str> = raw.iter().map(|r| r.1.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let class_index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let rows = raw
        .iter()
        .map(|(id, class, feats)| (*id, class_index[class.as_str()], feats.clone()))
        .collect();
    assemble(rows, dim.unwrap_or(0), classes.len(), &files.edges)
}

fn load_edge_list(files: &GraphFiles) -> Result<GraphData> {
    let node_path = files.nodes.display().to_string();
    let text = read(&files.nodes)?;
    let parse_err = |line: usize, msg: String| GraphError::Parse {
        path: node_path.clone(),
        line,
        msg,
    };

    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for (line, l) in content_lines(&text) {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(line, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let id = fields[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("node id {:?}: {e}", fields[0])))?;
        let label = fields[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| parse_err(line, format!("label {:?}: {e}", fields[1])))?;
        let feats = if fields[2].trim().is_empty() {
            Vec::new()
        } else {
            fields[2]
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(line, format!("feature: {e}")))?
        };
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(parse_err(line, format!("{} features, expected {d}", feats.len())))
            }
            _ => {}
        }
        rows.push((id, label, feats));
    }
    let num_classes = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    assemble(rows, dim.unwrap_or(0), num_classes, &files.edges)
}

/// Writes a graph in the edge-list format; each undirected edge once.
pub fn save_graph(graph: &GraphData, files: &GraphFiles) -> Result<()> {
    let mut nodes = String::new();
    for i in 0..graph.n() {
        let feats: Vec<String> = graph.features().row_slice(i).iter().map(f64::to_string).collect();
        let _ = writeln!(nodes, "{}\t{}\t{}", graph.node_ids()[i], graph.labels()[i], feats.join(","));
    }
    let mut edges = String::new();
    for (u, v) in graph.undirected_edges() {
        let _ = writeln!(edges, "{}\t{}", graph.node_ids()[u], graph.node_ids()[v]);
    }
    for (path, body) in [(&files.nodes, nodes), (&files.edges, edges)] {
        fs::write(path, body).map_err(|source| GraphError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
