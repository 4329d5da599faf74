use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Target, Vocab};
use crate::model::Task;

/// Graphs sharing one vocabulary and task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub task: Task,
    pub graphs: Vec<Graph>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    vocab: Vocab,
    task: Task,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphLine {
    nodes: Vec<Vec<usize>>,
    edges: Vec<(usize, usize, Vec<usize>)>,
    #[serde(default)]
    directed: bool,
    #[serde(default)]
    target: Option<f64>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn to_graph(line: GraphLine, task: Task) -> std::result::Result<Graph, String> {
    let (edges, edge_feats): (Vec<_>, Vec<_>) = line.edges.into_iter().map(|(s, d, f)| ((s, d), f)).unzip();
    let g = Graph::with_features(line.nodes.len(), line.directed, edges, line.nodes, edge_feats)
        .map_err(|e| e.to_string())?;
    Ok(match (line.target, task) {
        (None, _) => g,
        (Some(t), Task::Regression) => g.with_target(Target::Regression(t)),
        (Some(t), Task::Binary) if t == 0.0 || t == 1.0 => g.with_target(Target::Binary(t == 1.0)),
        (Some(t), Task::Binary) => return Err(format!("binary target must be 0 or 1, got {t}")),
    })
}

fn to_line(g: &Graph) -> GraphLine {
    GraphLine {
        nodes: g.node_feats().to_vec(),
        edges: g.edges().iter().zip(g.edge_feats()).map(|(&(s, d), f)| (s, d, f.clone())).collect(),
        directed: g.is_directed(),
        target: g.target.map(Target::value),
    }
}

/// Read a header line followed by one graph per line. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header: Header = loop {
        match lines.next() {
            None => return Err(parse_err(path, 1, "missing header line")),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, format!("header: {e}")))?;
            }
        }
    };
    let mut graphs = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: GraphLine = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let g = to_graph(parsed, header.task).map_err(|m| parse_err(path, i + 1, m))?;
        g.validate(&header.vocab).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        graphs.push(g);
    }
    Ok(Dataset { vocab: header.vocab, task: header.task, graphs })
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = Header { vocab: data.vocab.clone(), task: data.task };
    let json = |e: serde_json::Error| Error::Io(std::io::Error::other(e));
    serde_json::to_writer(&mut w, &header).map_err(json)?;
    writeln!(w)?;
    for g in &data.graphs {
        serde_json::to_writer(&mut w, &to_line(g)).map_err(json)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    const HEADER: &str = r#"{"vocab":{"node":[3],"edge":[2]},"task":"regression"}"#;

    #[test]
    fn parses_graphs() {
        let f = write(&format!(
            "{HEADER}\n{}\n\n{}\n",
            r#"{"nodes":[[0],[2]],"edges":[[0,1,[1]]],"target":1.5}"#,
            r#"{"nodes":[[1]],"edges":[],"directed":true}"#
        ));
        let d = load_dataset(f.path()).unwrap();
        assert_eq!(d.graphs.len(), 2);
        assert_eq!(d.graphs[0].target, Some(Target::Regression(1.5)));
        assert_eq!(d.graphs[0].edge_feats(), &[vec![1]]);
        assert!(d.graphs[1].is_directed());
        assert_eq!(d.graphs[1].target, None);
    }

    #[test]
    fn header_only_is_empty() {
        let d = load_dataset(write(&format!("{HEADER}\n")).path()).unwrap();
        assert!(d.graphs.is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let good = r#"{"nodes":[[0]],"edges":[]}"#;
        let mut text = format!("{HEADER}\n");
        for _ in 0..5 {
            text.push_str(good);
            text.push('\n');
        }
        text.push_str("{\"nodes\": [[0]], \"edges\": oops}\n");
        match load_dataset(write(&text).path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
        let out_of_vocab = format!("{HEADER}\n{good}\n{}\n", r#"{"nodes":[[3]],"edges":[]}"#);
        match load_dataset(write(&out_of_vocab).path()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 3);
                assert!(msg.contains('3'), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{HEADER}\n{}\n", r#"{"nodes":[],"edges":[],"extra":1}"#);
        assert!(load_dataset(write(&text).path()).is_err());
    }

    #[test]
    fn binary_targets() {
        let header = r#"{"vocab":{"node":[],"edge":[]},"task":"binary"}"#;
        let ok = format!("{header}\n{}\n", r#"{"nodes":[[]],"edges":[],"target":1}"#);
        let d = load_dataset(write(&ok).path()).unwrap();
        assert_eq!(d.graphs[0].target, Some(Target::Binary(true)));
        let bad = format!("{header}\n{}\n", r#"{"nodes":[[]],"edges":[],"target":0.5}"#);
        assert!(load_dataset(write(&bad).path()).is_err());
    }
}
