//! Tab-separated node, edge and label files.
//!
//! ```text
//! nodes:  <node_id>\t<f_1>,<f_2>,...,<f_dp>
//! edges:  <src_id>\t<dst_id>[\t<e_1>,...,<e_de>]
//! labels: <node_id>\t<label_idx>[,<label_idx>...]
//! ```
//!
//! Blank lines and lines starting with `#` are skipped.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{GraphError, GraphParts, PropertyGraph, Result};

fn io_err(path: &Path, source: std::io::Error) -> GraphError {
    GraphError::Io { path: path.display().to_string(), source }
}

/// Yields `(line_number, content)` for every non-comment line.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((i + 1, trimmed.to_string()));
    }
    Ok(out)
}

fn parse_reals(file: &str, line: usize, field: &str) -> Result<Vec<f64>> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| GraphError::Malformed {
                file: file.to_string(),
                line,
                msg: format!("`{tok}` is not a finite real"),
            })
        })
        .collect()
}

pub struct NodeTable {
    pub ids: Vec<String>,
    pub index: HashMap<String, usize>,
    pub props: Array2<f64>,
}

pub fn read_node_file(path: &Path) -> Result<NodeTable> {
    let name = path.display().to_string();
    let mut ids = Vec::new();
    let mut index = HashMap::new();
    let mut flat = Vec::new();
    let mut dim = None;
    for (line, text) in data_lines(path)? {
        let (id, feats) = text.split_once('\t').ok_or_else(|| GraphError::Malformed {
            file: name.clone(),
            line,
            msg: "expected `<node_id>\\t<features>`".into(),
        })?;
        let values = parse_reals(&name, line, feats)?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected {
            return Err(GraphError::Dimension { file: name, line, expected, found: values.len() });
        }
        if index.insert(id.to_string(), ids.len()).is_some() {
            return Err(GraphError::DuplicateNode(id.to_string()));
        }
        ids.push(id.to_string());
        flat.extend(values);
    }
    let dim = dim.unwrap_or(0);
    let props = Array2::from_shape_vec((ids.len(), dim), flat).expect("rows checked for equal width");
    Ok(NodeTable { ids, index, props })
}

pub struct EdgeTable {
    pub edges: Vec<(usize, usize)>,
    pub props: Option<Array2<f64>>,
}

pub fn read_edge_file(path: &Path, index: &HashMap<String, usize>) -> Result<EdgeTable> {
    let name = path.display().to_string();
    let mut edges = Vec::new();
    let mut flat = Vec::new();
    let mut dim: Option<usize> = None;
    for (line, text) in data_lines(path)? {
        let mut fields = text.split('\t');
        let (src, dst) = match (fields.next(), fields.next()) {
            (Some(s), Some(d)) => (s, d),
            _ => {
                return Err(GraphError::Malformed { file: name, line, msg: "expected `<src>\\t<dst>`".into() });
            }
        };
        let feats = fields.next();
        if fields.next().is_some() {
            return Err(GraphError::Malformed { file: name, line, msg: "too many fields".into() });
        }
        let lookup = |id: &str| {
            index.get(id).copied().ok_or_else(|| GraphError::DanglingEndpoint {
                file: name.clone(),
                line,
                id: id.to_string(),
            })
        };
        let (u, v) = (lookup(src)?, lookup(dst)?);
        if u == v {
            return Err(GraphError::SelfLoop(src.to_string()));
        }
        let values = match feats {
            Some(f) => parse_reals(&name, line, f)?,
            None => Vec::new(),
        };
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected {
            return Err(GraphError::Dimension { file: name, line, expected, found: values.len() });
        }
        edges.push((u, v));
        flat.extend(values);
    }
    let props = match dim {
        Some(d) if d > 0 => Some(Array2::from_shape_vec((edges.len(), d), flat).expect("rows checked")),
        _ => None,
    };
    Ok(EdgeTable { edges, props })
}

pub fn read_label_file(path: &Path, index: &HashMap<String, usize>) -> Result<Array2<u8>> {
    let name = path.display().to_string();
    let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut width = 0;
    for (line, text) in data_lines(path)? {
        let (id, labels) = text.split_once('\t').ok_or_else(|| GraphError::Malformed {
            file: name.clone(),
            line,
            msg: "expected `<node_id>\\t<labels>`".into(),
        })?;
        let node = index.get(id).copied().ok_or_else(|| GraphError::DanglingEndpoint {
            file: name.clone(),
            line,
            id: id.to_string(),
        })?;
        let idx = labels
            .split(',')
            .map(|t| {
                t.trim().parse::<usize>().map_err(|_| GraphError::Malformed {
                    file: name.clone(),
                    line,
                    msg: format!("`{}` is not a label index", t.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        width = width.max(idx.iter().max().map_or(0, |m| m + 1));
        rows.push((node, idx));
    }
    let mut out = Array2::zeros((index.len(), width));
    for (node, idx) in rows {
        for i in idx {
            out[[node, i]] = 1;
        }
    }
    Ok(out)
}

/// Loads a property graph. Undirected edges are expanded into both
/// directions; node ids are densified in file order.
pub fn load_graph(
    node_file: &Path,
    edge_file: &Path,
    label_file: Option<&Path>,
    directed: bool,
) -> Result<PropertyGraph> {
    let nodes = read_node_file(node_file)?;
    let edges = read_edge_file(edge_file, &nodes.index)?;
    let labels = label_file.map(|p| read_label_file(p, &nodes.index)).transpose()?;
    PropertyGraph::build(GraphParts {
        node_props: nodes.props,
        edges: edges.edges,
        directed,
        edge_props: edges.props,
        edge_labels: None,
        node_labels: labels,
        node_ids: Some(nodes.ids),
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn join_reals<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    values.into_iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Writes canonical edges (one line per undirected pair) with original ids.
pub fn write_edges(g: &PropertyGraph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let ids = g.node_ids();
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        for e in g.canonical_edges() {
            write!(w, "{}\t{}", ids[g.source(e)], ids[g.target(e)])?;
            if let Some(ep) = g.edge_props() {
                write!(w, "\t{}", join_reals(ep.row(e)))?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| io_err(path, e))
}

/// Writes the node, edge and (if present) label files of `g` into `dir`.
pub fn write_graph(g: &PropertyGraph, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let node_path = dir.join("nodes.tsv");
    let mut w = create(&node_path)?;
    let res: std::io::Result<()> = (|| {
        for (v, id) in g.node_ids().iter().enumerate() {
            writeln!(w, "{id}\t{}", join_reals(g.prop(v)))?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(&node_path, e))?;
    write_edges(g, &dir.join("edges.tsv"))?;
    if let Some(labels) = g.node_labels() {
        let label_path = dir.join("labels.tsv");
        let mut w = create(&label_path)?;
        let res: std::io::Result<()> = (|| {
            for (v, id) in g.node_ids().iter().enumerate() {
                let idx: Vec<String> =
                    labels.row(v).iter().enumerate().filter(|(_, &x)| x != 0).map(|(i, _)| i.to_string()).collect();
                writeln!(w, "{id}\t{}", idx.join(","))?;
            }
            w.flush()
        })();
        res.map_err(|e| io_err(&label_path, e))?;
    }
    Ok(())
}

/// `<dense_index>\t<original_id>` lines.
pub fn write_id_map(g: &PropertyGraph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        for (i, id) in g.node_ids().iter().enumerate() {
            writeln!(w, "{i}\t{id}")?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

/// `<node_id>\t<cluster_id>` lines.
pub fn write_cluster_map(g: &PropertyGraph, assignment: &[usize], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let res: std::io::Result<()> = (|| {
        for (id, c) in g.node_ids().iter().zip(assignment) {
            writeln!(w, "{id}\t{c}")?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Direction;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_string_ids_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "# header\nalpha\t1,0\nbeta\t0,1\ngamma\t1,1\n");
        let e = write(dir.path(), "e.tsv", "alpha\tbeta\nbeta\tgamma\n");
        let l = write(dir.path(), "l.tsv", "alpha\t0\nbeta\t1,2\ngamma\t2\n");
        let g = load_graph(&n, &e, Some(&l), false).unwrap();
        assert_eq!(g.n_nodes(), 3);
        assert_eq!(g.n_edges(), 4);
        assert_eq!(g.prop_dim(), 2);
        assert_eq!(g.label_dim(), 3);
        assert!(g.is_multi_label());
        assert_eq!(g.node_ids()[1], "beta");
        let mut nb = g.neighbors(1, Direction::Out).unwrap().to_vec();
        nb.sort();
        assert_eq!(nb, vec![0, 2]);
    }

    #[test]
    fn empty_edge_file() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "a\t1\nb\t2\nc\t3\n");
        let e = write(dir.path(), "e.tsv", "# nothing\n");
        let g = load_graph(&n, &e, None, false).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert!(g.out_adj().offsets.iter().all(|&o| o == 0));
    }

    #[test]
    fn malformed_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "a\t1,2\nb\t1,x\n");
        match read_node_file(&n) {
            Err(GraphError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}", other = other.err()),
        }
    }

    #[test]
    fn dangling_endpoint() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "a\t1\nb\t2\n");
        let e = write(dir.path(), "e.tsv", "a\tb\na\tz\n");
        let err = load_graph(&n, &e, None, false).unwrap_err();
        assert!(matches!(err, GraphError::DanglingEndpoint { line: 2, ref id, .. } if id == "z"));
    }

    #[test]
    fn inconsistent_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let n = write(dir.path(), "n.tsv", "a\t1,2\nb\t1\n");
        assert!(matches!(read_node_file(&n), Err(GraphError::Dimension { expected: 2, found: 1, .. })));
        let n = write(dir.path(), "n2.tsv", "a\t1\nb\t1\nc\t1\n");
        let e = write(dir.path(), "e.tsv", "a\tb\t0.5\nb\tc\t0.5,1\n");
        assert!(matches!(load_graph(&n, &e, None, true), Err(GraphError::Dimension { .. })));
    }
}
