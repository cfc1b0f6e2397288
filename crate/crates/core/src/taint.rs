//! Taint propagation over a [`HypernodeGraph`].

use std::collections::BTreeSet;

use serde::Serialize;

use crate::hypergraph::{Endpoint, GraphId, HypernodeGraph, NodeId, NodeKind, ROOT};
use crate::model::{MSG_SENDER, MSG_VALUE};

/// Nodes and edges reached from the taint sources.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TaintSubgraph {
    /// Tainted basic nodes plus every hypernode entered through a tainted edge.
    pub tainted: BTreeSet<Endpoint>,
    /// Flow edges whose tail is tainted.
    pub taint_edges: BTreeSet<(Endpoint, Endpoint)>,
    /// Hypernodes entered through a tainted edge.
    pub coverage: BTreeSet<GraphId>,
    /// Source nodes that exist in the graph.
    pub sources: BTreeSet<Endpoint>,
    /// Outer propagation rounds executed, the final unchanged one included.
    pub rounds: usize,
}

impl TaintSubgraph {
    pub fn is_tainted(&self, e: Endpoint) -> bool {
        self.tainted.contains(&e)
    }

    pub fn tainted_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.tainted.iter().filter_map(|e| match e {
            Endpoint::Node(n) => Some(*n),
            Endpoint::Graph(_) => None,
        })
    }
}

/// Every builtin `msg.sender` / `msg.value` node in `h`.
pub fn default_sources(h: &HypernodeGraph) -> BTreeSet<NodeId> {
    h.nodes()
        .iter()
        .filter(|n| n.kind == NodeKind::Builtin && matches!(n.id.name(), MSG_SENDER | MSG_VALUE))
        .map(|n| n.id.clone())
        .collect()
}

/// Propagates taint from `sources` to a fixed point. Sources absent from
/// `h` are ignored.
pub fn tpa(h: &HypernodeGraph, sources: &BTreeSet<NodeId>) -> TaintSubgraph {
    tpa_from(h, sources.iter().filter_map(|id| h.find_node(id)).map(Endpoint::Node))
}

/// [`tpa`] seeded with endpoints directly. Unknown endpoints are ignored.
pub fn tpa_from(h: &HypernodeGraph, sources: impl IntoIterator<Item = Endpoint>) -> TaintSubgraph {
    let mut out = TaintSubgraph::default();
    for s in sources {
        let known = match s {
            Endpoint::Node(n) => h.node(n).is_some(),
            Endpoint::Graph(g) => h.graph(g).is_ok(),
        };
        if known {
            out.sources.insert(s);
            out.tainted.insert(s);
        }
    }

    let bound = h.nodes().len() + h.edge_count() + 1;
    let mut covered = vec![false; h.graph_count()];
    let mut stack: Vec<GraphId> = Vec::new();
    loop {
        out.rounds += 1;
        let before = (out.tainted.len(), out.taint_edges.len());
        covered.iter_mut().for_each(|c| *c = false);
        stack.clear();
        stack.push(ROOT);
        while let Some(g) = stack.pop() {
            if std::mem::replace(&mut covered[g.0], true) {
                continue;
            }
            let graph = h.graph(g).expect("graph ids come from the graph itself");
            for &(n0, n1) in &graph.edges {
                if !out.tainted.contains(&n0) {
                    continue;
                }
                out.taint_edges.insert((n0, n1));
                out.tainted.insert(n1);
                if let Endpoint::Graph(child) = n1 {
                    out.coverage.insert(child);
                    if !covered[child.0] {
                        stack.push(child);
                    }
                }
            }
            stack.extend(graph.children.iter().rev().filter(|c| !covered[c.0]));
        }
        if (out.tainted.len(), out.taint_edges.len()) == before {
            break;
        }
        debug_assert!(out.rounds <= bound, "propagation exceeded its round bound");
    }
    out
}

/// Tainted state-variable nodes.
pub fn tainted_state_vars(t: &TaintSubgraph, h: &HypernodeGraph) -> BTreeSet<NodeId> {
    t.tainted_nodes().filter_map(|n| h.node(n)).filter(|n| n.kind == NodeKind::State).map(|n| n.id.clone()).collect()
}
