//! DOT rendering of a taint subgraph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::hypergraph::{Endpoint, GraphKind, HypernodeGraph, NodeKind};
use crate::taint::TaintSubgraph;

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions {
    /// Group function-local nodes into one cluster per function.
    pub cluster: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DotDocument {
    pub text: String,
    pub node_count: usize,
    pub edge_count: usize,
}

impl DotDocument {
    pub fn write_to(&self, dir: &Path, name: &str) -> io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{name}.taint.dot"));
        std::fs::write(&path, &self.text)?;
        Ok(path)
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

struct RenderedNode {
    label: String,
    attrs: &'static str,
    cluster: Option<String>,
}

fn rendered_node(h: &HypernodeGraph, t: &TaintSubgraph, e: Endpoint) -> RenderedNode {
    match e {
        Endpoint::Node(n) => {
            let node = h.node(n).expect("tainted endpoints come from the graph");
            let parts = &node.id.0;
            let label = match node.kind {
                NodeKind::State => parts.join("."),
                _ if parts.len() > 1 => parts[1..].join("."),
                _ => parts.join("."),
            };
            let attrs = if t.sources.contains(&e) {
                "shape=diamond, style=filled"
            } else {
                match node.kind {
                    NodeKind::State => "shape=box",
                    NodeKind::External => "shape=octagon",
                    _ => "shape=ellipse",
                }
            };
            let cluster = (node.kind != NodeKind::State).then(|| h.endpoint_label(Endpoint::Graph(node.graph)));
            RenderedNode { label, attrs, cluster }
        }
        Endpoint::Graph(g) => {
            let graph = h.graph(g).expect("tainted endpoints come from the graph");
            let label = match graph.kind {
                GraphKind::Function if graph.path.len() > 1 => format!("{}()", graph.path[1..].join(".")),
                _ => graph.name(),
            };
            RenderedNode { label, attrs: "shape=component", cluster: None }
        }
    }
}

/// Renders every tainted endpoint and taint edge. Node ids are dotted
/// paths; state variables appear once per contract.
pub fn to_dot(t: &TaintSubgraph, h: &HypernodeGraph, opts: RenderOptions) -> DotDocument {
    let mut nodes: BTreeMap<String, RenderedNode> = BTreeMap::new();
    for &e in &t.tainted {
        nodes.insert(h.endpoint_label(e), rendered_node(h, t, e));
    }
    let edges: BTreeSet<(String, String)> =
        t.taint_edges.iter().map(|&(a, b)| (h.endpoint_label(a), h.endpoint_label(b))).collect();

    let mut text = String::from("digraph taint {\n");
    let node_line = |text: &mut String, indent: &str, id: &str, n: &RenderedNode| {
        let _ = writeln!(text, "{indent}{} [label={}, {}];", quote(id), quote(&n.label), n.attrs);
    };
    if opts.cluster {
        let mut clusters: BTreeMap<&str, Vec<(&String, &RenderedNode)>> = BTreeMap::new();
        for (id, n) in &nodes {
            match &n.cluster {
                Some(c) => clusters.entry(c.as_str()).or_default().push((id, n)),
                None => node_line(&mut text, "  ", id, n),
            }
        }
        for (cluster, members) in clusters {
            let _ = writeln!(text, "  subgraph {} {{", quote(&format!("cluster_{cluster}")));
            let _ = writeln!(text, "    label={};", quote(cluster.split_once('.').map_or(cluster, |(_, f)| f)));
            for (id, n) in members {
                node_line(&mut text, "    ", id, n);
            }
            text.push_str("  }\n");
        }
    } else {
        for (id, n) in &nodes {
            node_line(&mut text, "  ", id, n);
        }
    }
    for (a, b) in &edges {
        let _ = writeln!(text, "  {} -> {};", quote(a), quote(b));
    }
    text.push_str("}\n");
    DotDocument { text, node_count: nodes.len(), edge_count: edges.len() }
}
