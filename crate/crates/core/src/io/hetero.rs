//! Heterogeneous graphs as text files.
//!
//! * edges: `src<TAB>dst<TAB>edge_type_id[<TAB>weight]`, 0-indexed, each
//!   undirected edge listed once; repeated rows add their weights.
//! * features: one whitespace-separated row of floats per node.
//! * labels: one class index per node, `-1` for unlabeled nodes.
//! * splits (optional): one of `train`, `val`, `test`, `none` per node.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::io::{content_lines, default_split, write_file};
use crate::model::{TaskKind, TaskSpec};
use crate::tensor::Tensor;

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, token: &str, what: &str) -> Result<T> {
    token
        .parse()
        .map_err(|_| Error::parse(path.display(), line, format!("cannot parse {what} from {token:?}")))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, text) in content_lines(path)? {
        let row = text
            .split_whitespace()
            .map(|t| parse_num::<f64>(path, line, t, "feature"))
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(path.display(), line, "non-finite feature"));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::parse(
                    path.display(),
                    line,
                    format!("{} features, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{}: no feature rows", path.display())));
    }
    Tensor::from_rows(&rows)
}

pub fn read_labels(path: &Path) -> Result<Vec<Option<usize>>> {
    content_lines(path)?
        .into_iter()
        .map(|(line, text)| {
            let v: i64 = parse_num(path, line, &text, "label")?;
            match v {
                -1 => Ok(None),
                v if v >= 0 => Ok(Some(v as usize)),
                _ => Err(Error::parse(path.display(), line, format!("invalid label {v}"))),
            }
        })
        .collect()
}

/// Typed edges, checked against `num_nodes` and the declared edge types.
pub fn read_edges(path: &Path, num_nodes: usize, edge_types: Option<&[u32]>) -> Result<Vec<(usize, usize, u32, f64)>> {
    let mut edges = Vec::new();
    for (line, text) in content_lines(path)? {
        let f: Vec<&str> = text.split_whitespace().collect();
        if f.len() != 3 && f.len() != 4 {
            return Err(Error::parse(path.display(), line, format!("expected 3 or 4 columns, found {}", f.len())));
        }
        let u: usize = parse_num(path, line, f[0], "source node")?;
        let v: usize = parse_num(path, line, f[1], "target node")?;
        let ty: u32 = parse_num(path, line, f[2], "edge type")?;
        let w: f64 = if f.len() == 4 { parse_num(path, line, f[3], "weight")? } else { 1.0 };
        if u >= num_nodes || v >= num_nodes {
            return Err(Error::parse(
                path.display(),
                line,
                format!("node index out of range for {num_nodes} nodes"),
            ));
        }
        if u == v {
            return Err(Error::parse(path.display(), line, "self-loop"));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::parse(path.display(), line, format!("invalid weight {w}")));
        }
        if let Some(types) = edge_types {
            if !types.contains(&ty) {
                return Err(Error::parse(path.display(), line, format!("unknown edge type {ty}")));
            }
        }
        edges.push((u, v, ty, w));
    }
    Ok(edges)
}

fn read_splits(path: &Path, num_nodes: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let lines = content_lines(path)?;
    if lines.len() != num_nodes {
        return Err(Error::Data(format!(
            "{}: {} split rows for {num_nodes} nodes",
            path.display(),
            lines.len()
        )));
    }
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (node, (line, text)) in lines.into_iter().enumerate() {
        match text.as_str() {
            "train" => tr.push(node),
            "val" => va.push(node),
            "test" => te.push(node),
            "none" => {}
            other => return Err(Error::parse(path.display(), line, format!("unknown split {other:?}"))),
        }
    }
    Ok((tr, va, te))
}

/// Paths of a heterogeneous dataset.
#[derive(Clone, Copy, Debug)]
pub struct HeteroFiles<'a> {
    pub edges: &'a Path,
    pub features: &'a Path,
    pub labels: &'a Path,
    pub splits: Option<&'a Path>,
}

/// Loads the graph and a node-classification task. Without a splits file
/// the labeled nodes are split 60/20/20 by `split_seed`.
pub fn load_hetero(files: HeteroFiles<'_>, edge_types: Option<&[u32]>, split_seed: u64) -> Result<(Graph, TaskSpec)> {
    let features = read_features(files.features)?;
    let n = features.rows();
    let labels = read_labels(files.labels)?;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{}: {} labels for {n} feature rows",
            files.labels.display(),
            labels.len()
        )));
    }
    let edges = read_edges(files.edges, n, edge_types)?;
    let types: Vec<u32> = match edge_types {
        Some(t) => t.to_vec(),
        None => edges.iter().map(|e| e.2).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let graph = Graph::from_typed_edges(n, &types, &edges, features)?;
    let num_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let (train, val, test) = match files.splits {
        Some(p) => read_splits(p, n)?,
        None => {
            let labeled: Vec<usize> = (0..n).filter(|&i| labels[i].is_some()).collect();
            default_split(&labeled, split_seed)
        }
    };
    let task = TaskSpec::new(
        TaskKind::NodeClassification {
            labels,
            num_classes: num_classes.max(2),
        },
        train,
        val,
        test,
    )?;
    Ok((graph, task))
}

/// Edge list with one row per undirected edge; the weight column is
/// written only when it differs from 1.
pub fn edge_list(graph: &Graph) -> String {
    let mut out = String::new();
    for (u, v, ty, w) in graph.undirected_edges() {
        if w == 1.0 {
            out.push_str(&format!("{u}\t{v}\t{ty}\n"));
        } else {
            out.push_str(&format!("{u}\t{v}\t{ty}\t{w:?}\n"));
        }
    }
    out
}

pub fn feature_table(features: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..features.rows() {
        let row: Vec<String> = features.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

pub fn label_lines(labels: &[Option<usize>]) -> String {
    labels
        .iter()
        .map(|l| l.map_or_else(|| "-1".to_string(), |c| c.to_string()) + "\n")
        .collect()
}

pub fn split_lines(task: &TaskSpec) -> String {
    let mut tags = vec!["none"; task.num_items()];
    for &i in &task.train {
        tags[i] = "train";
    }
    for &i in &task.val {
        tags[i] = "val";
    }
    for &i in &task.test {
        tags[i] = "test";
    }
    tags.iter().map(|t| format!("{t}\n")).collect()
}

/// Writes `edges.tsv`, `features.tsv`, `labels.tsv` and `splits.tsv` into `dir`.
pub fn write_hetero(dir: &Path, graph: &Graph, task: &TaskSpec) -> Result<()> {
    let labels = match &task.kind {
        TaskKind::NodeClassification { labels, .. } => labels,
        TaskKind::GraphRegression { .. } => return Err(Error::InvalidTask("expected node classification".into())),
    };
    write_file(&dir.join("edges.tsv"), &edge_list(graph))?;
    write_file(&dir.join("features.tsv"), &feature_table(graph.node_features()))?;
    write_file(&dir.join("labels.tsv"), &label_lines(labels))?;
    write_file(&dir.join("splits.tsv"), &split_lines(task))?;
    Ok(())
}
