//! Hierarchical hypernode graph: a root graph holding contract hypernodes,
//! each holding function hypernodes and state-variable nodes; function
//! hypernodes hold their locals, parameters and builtin reads.
//!
//! An edge is stored in the lowest graph `G` such that each endpoint is a
//! member of `G` or of a child of `G`. Endpoints are basic nodes or graphs.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{ContractModel, FunctionModel, Scope, Span, StatementKind, VarRef};

pub const ROOT: GraphId = GraphId(0);
pub const EXTERNAL_SINK: &str = "@external";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HypergraphError {
    #[error("unknown graph {0}")]
    UnknownGraph(usize),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("no source span for `{0}`")]
    NoSpan(String),
    #[error("edge {0} -> {1} has no graph holding both endpoints")]
    InvalidEdge(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GraphId(pub usize);

/// Path-based identifier: `[contract, var]` for state variables,
/// `[contract, function, var]` for everything inside a function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub Vec<String>);

impl NodeId {
    pub fn new<S: Into<String>>(parts: impl IntoIterator<Item = S>) -> Self {
        NodeId(parts.into_iter().map(Into::into).collect())
    }

    pub fn name(&self) -> &str {
        self.0.last().map(String::as_str).unwrap_or_default()
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Node(usize),
    Graph(GraphId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    State,
    Local,
    Param,
    Builtin,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Root,
    Contract,
    Function,
}

#[derive(Debug, Clone)]
pub struct BasicNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub graph: GraphId,
    pub span: Option<Span>,
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub path: Vec<String>,
    pub kind: GraphKind,
    pub parent: Option<GraphId>,
    pub nodes: Vec<usize>,
    pub children: Vec<GraphId>,
    pub edges: IndexSet<(Endpoint, Endpoint)>,
    pub span: Option<Span>,
}

impl Graph {
    pub fn name(&self) -> String {
        if self.path.is_empty() {
            "@root".to_string()
        } else {
            self.path.join(".")
        }
    }
}

/// Read-only view returned by [`HypernodeGraph::graph_of`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphView {
    pub id: GraphId,
    pub members: Vec<Endpoint>,
    pub edges: Vec<(Endpoint, Endpoint)>,
}

/// A call whose target is not a function of the calling contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnresolvedCallee {
    pub contract: String,
    pub function: String,
    pub callee: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Add edges from branch/loop condition uses into variables defined
    /// under that branch or loop.
    pub implicit_flow: bool,
}

#[derive(Debug, Clone)]
pub struct HypernodeGraph {
    graphs: Vec<Graph>,
    nodes: Vec<BasicNode>,
    node_index: HashMap<NodeId, usize>,
    source_text: String,
    unresolved: Vec<UnresolvedCallee>,
}

impl Default for HypernodeGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl HypernodeGraph {
    /// An empty graph holding only the root.
    pub fn new() -> Self {
        HypernodeGraph {
            graphs: vec![Graph {
                path: Vec::new(),
                kind: GraphKind::Root,
                parent: None,
                nodes: Vec::new(),
                children: Vec::new(),
                edges: IndexSet::new(),
                span: None,
            }],
            nodes: Vec::new(),
            node_index: HashMap::new(),
            source_text: String::new(),
            unresolved: Vec::new(),
        }
    }

    pub fn with_source(mut self, source_text: impl Into<String>) -> Self {
        self.source_text = source_text.into();
        self
    }

    pub fn add_graph(
        &mut self,
        parent: GraphId,
        name: impl Into<String>,
        kind: GraphKind,
        span: Option<Span>,
    ) -> Result<GraphId, HypergraphError> {
        let mut path = self.graph(parent)?.path.clone();
        path.push(name.into());
        let id = GraphId(self.graphs.len());
        self.graphs.push(Graph {
            path,
            kind,
            parent: Some(parent),
            nodes: Vec::new(),
            children: Vec::new(),
            edges: IndexSet::new(),
            span,
        });
        self.graphs[parent.0].children.push(id);
        Ok(id)
    }

    pub fn add_node(
        &mut self,
        graph: GraphId,
        id: NodeId,
        kind: NodeKind,
        span: Option<Span>,
    ) -> Result<usize, HypergraphError> {
        self.graph(graph)?;
        if self.node_index.contains_key(&id) {
            return Err(HypergraphError::DuplicateNode(id.to_string()));
        }
        let idx = self.nodes.len();
        self.node_index.insert(id.clone(), idx);
        self.nodes.push(BasicNode { id, kind, graph, span });
        self.graphs[graph.0].nodes.push(idx);
        Ok(idx)
    }

    /// Graph in which `e` is a direct member.
    fn member_of(&self, e: Endpoint) -> Result<Option<GraphId>, HypergraphError> {
        match e {
            Endpoint::Node(n) => Ok(Some(self.nodes.get(n).ok_or(HypergraphError::UnknownNode(n))?.graph)),
            Endpoint::Graph(g) => Ok(self.graph(g)?.parent),
        }
    }

    fn depth(&self, mut g: GraphId) -> usize {
        let mut d = 0;
        while let Some(p) = self.graphs[g.0].parent {
            g = p;
            d += 1;
        }
        d
    }

    /// The graph an edge `a -> b` would be stored in, if any.
    pub fn edge_home(&self, a: Endpoint, b: Endpoint) -> Result<GraphId, HypergraphError> {
        let candidates = |e: Endpoint| -> Result<Vec<GraphId>, HypergraphError> {
            let Some(g) = self.member_of(e)? else { return Ok(Vec::new()) };
            Ok(std::iter::once(g).chain(self.graphs[g.0].parent).collect())
        };
        let (ca, cb) = (candidates(a)?, candidates(b)?);
        ca.into_iter()
            .filter(|g| cb.contains(g))
            .max_by_key(|g| self.depth(*g))
            .ok_or_else(|| HypergraphError::InvalidEdge(self.endpoint_label(a), self.endpoint_label(b)))
    }

    /// Adds `a -> b`; returns `false` if it was already present.
    pub fn add_edge(&mut self, a: Endpoint, b: Endpoint) -> Result<bool, HypergraphError> {
        let home = self.edge_home(a, b)?;
        Ok(self.graphs[home.0].edges.insert((a, b)))
    }

    pub fn graph(&self, g: GraphId) -> Result<&Graph, HypergraphError> {
        self.graphs.get(g.0).ok_or(HypergraphError::UnknownGraph(g.0))
    }

    pub fn graphs(&self) -> impl Iterator<Item = (GraphId, &Graph)> {
        self.graphs.iter().enumerate().map(|(i, g)| (GraphId(i), g))
    }

    pub fn graph_count(&self) -> usize {
        self.graphs.len()
    }

    pub fn node(&self, idx: usize) -> Option<&BasicNode> {
        self.nodes.get(idx)
    }

    pub fn nodes(&self) -> &[BasicNode] {
        &self.nodes
    }

    pub fn find_node(&self, id: &NodeId) -> Option<usize> {
        self.node_index.get(id).copied()
    }

    pub fn find_graph(&self, path: &[&str]) -> Option<GraphId> {
        self.graphs
            .iter()
            .position(|g| g.path.len() == path.len() && g.path.iter().zip(path).all(|(a, b)| a == b))
            .map(GraphId)
    }

    pub fn unresolved(&self) -> &[UnresolvedCallee] {
        &self.unresolved
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    /// Every edge with the graph it is stored in, graphs in creation order.
    pub fn all_edges(&self) -> impl Iterator<Item = (GraphId, Endpoint, Endpoint)> + '_ {
        self.graphs().flat_map(|(id, g)| g.edges.iter().map(move |&(a, b)| (id, a, b)))
    }

    pub fn edge_count(&self) -> usize {
        self.graphs.iter().map(|g| g.edges.len()).sum()
    }

    pub fn graph_of(&self, g: GraphId) -> Result<GraphView, HypergraphError> {
        let graph = self.graph(g)?;
        let members = graph
            .nodes
            .iter()
            .map(|&n| Endpoint::Node(n))
            .chain(graph.children.iter().map(|&c| Endpoint::Graph(c)))
            .collect();
        Ok(GraphView { id: g, members, edges: graph.edges.iter().copied().collect() })
    }

    pub fn span_of(&self, e: Endpoint) -> Option<Span> {
        match e {
            Endpoint::Node(n) => self.nodes.get(n)?.span,
            Endpoint::Graph(g) => self.graphs.get(g.0)?.span,
        }
    }

    /// Exact source text behind a node or hypernode.
    pub fn source_slice(&self, e: Endpoint) -> Result<&str, HypergraphError> {
        self.span_of(e)
            .and_then(|s| s.text(&self.source_text))
            .ok_or_else(|| HypergraphError::NoSpan(self.endpoint_label(e)))
    }

    /// Fully qualified dotted name of an endpoint.
    pub fn endpoint_label(&self, e: Endpoint) -> String {
        match e {
            Endpoint::Node(n) => self.nodes.get(n).map_or_else(|| format!("#{n}"), |b| b.id.to_string()),
            Endpoint::Graph(g) => self.graphs.get(g.0).map_or_else(|| format!("@graph{}", g.0), Graph::name),
        }
    }

    /// All function hypernodes with their `(contract, function)` names.
    pub fn functions(&self) -> impl Iterator<Item = (GraphId, &str, &str)> {
        self.graphs()
            .filter(|(_, g)| g.kind == GraphKind::Function)
            .map(|(id, g)| (id, g.path[0].as_str(), g.path[1].as_str()))
    }

    /// Builds the graph for `models`, whose spans index into `source_text`.
    pub fn build(models: &[ContractModel], source_text: &str, opts: BuildOptions) -> Self {
        let mut h = HypernodeGraph::new().with_source(source_text);
        for contract in models {
            h.add_contract(contract, opts);
        }
        h
    }

    fn add_contract(&mut self, contract: &ContractModel, opts: BuildOptions) {
        let cg = self
            .add_graph(ROOT, contract.name.clone(), GraphKind::Contract, contract.source_span)
            .expect("root exists");
        let fgraphs: HashMap<&str, GraphId> = contract
            .functions
            .iter()
            .map(|f| {
                let g = self
                    .add_graph(cg, f.name.clone(), GraphKind::Function, f.source_span)
                    .expect("contract graph exists");
                (f.name.as_str(), g)
            })
            .collect();

        for f in &contract.functions {
            let fg = fgraphs[f.name.as_str()];
            let mut vars = FunctionVars { contract, function: f, cg, fg };
            for p in &f.params {
                vars.node(self, &VarRef::param(p.name.clone()));
            }
            for stmt in &f.statements {
                let uses: Vec<usize> = stmt.uses.iter().map(|u| vars.node(self, u)).collect();
                let defs: Vec<usize> = stmt.defs.iter().map(|d| vars.node(self, d)).collect();
                for &u in &uses {
                    for &d in &defs {
                        self.insert(Endpoint::Node(u), Endpoint::Node(d));
                    }
                }
                if opts.implicit_flow {
                    let mut parent = stmt.parent;
                    while let Some(p) = parent {
                        let cond = &f.statements[p];
                        for u in &cond.uses {
                            let u = vars.node(self, u);
                            for &d in &defs {
                                self.insert(Endpoint::Node(u), Endpoint::Node(d));
                            }
                        }
                        parent = cond.parent;
                    }
                }
                for call in &stmt.calls {
                    let args: Vec<usize> = call.args.iter().map(|a| vars.node(self, a)).collect();
                    match fgraphs.get(call.callee.as_str()).filter(|_| call.resolved) {
                        Some(&callee) => {
                            for &a in &args {
                                self.insert(Endpoint::Node(a), Endpoint::Graph(callee));
                            }
                            for &d in &defs {
                                self.insert(Endpoint::Graph(callee), Endpoint::Node(d));
                            }
                        }
                        None => {
                            self.unresolved.push(UnresolvedCallee {
                                contract: contract.name.clone(),
                                function: f.name.clone(),
                                callee: call.callee.clone(),
                            });
                            if !args.is_empty() {
                                let sink = vars.external_sink(self);
                                for &a in &args {
                                    self.insert(Endpoint::Node(a), Endpoint::Node(sink));
                                }
                            }
                        }
                    }
                }
                if stmt.kind == StatementKind::Return {
                    for &u in &uses {
                        self.insert(Endpoint::Node(u), Endpoint::Graph(fg));
                    }
                }
            }
            // Entering a function hypernode reaches its parameters.
            for p in &f.params {
                let n = vars.node(self, &VarRef::param(p.name.clone()));
                self.insert(Endpoint::Graph(fg), Endpoint::Node(n));
            }
        }
    }

    fn insert(&mut self, a: Endpoint, b: Endpoint) {
        self.add_edge(a, b).expect("builder only creates well-formed edges");
    }

    /// JSON form for `--dump-graph`.
    pub fn to_json(&self) -> Value {
        let ep = |e: Endpoint| Value::String(self.endpoint_label(e));
        let span = |s: Option<Span>| s.map_or(Value::Null, |s| json!({"offset": s.offset, "length": s.length}));
        fn nest(
            h: &HypernodeGraph,
            g: GraphId,
            ep: &dyn Fn(Endpoint) -> Value,
            span: &dyn Fn(Option<Span>) -> Value,
        ) -> Value {
            let graph = &h.graphs[g.0];
            json!({
                "id": graph.name(),
                "kind": graph.kind,
                "span": span(graph.span),
                "nodes": graph.nodes.iter().map(|&n| {
                    let node = &h.nodes[n];
                    json!({"id": node.id.to_string(), "kind": node.kind, "span": span(node.span)})
                }).collect::<Vec<_>>(),
                "edges": graph.edges.iter().map(|&(a, b)| json!([ep(a), ep(b)])).collect::<Vec<_>>(),
                "children": graph.children.iter().map(|&c| nest(h, c, ep, span)).collect::<Vec<_>>(),
            })
        }
        json!({
            "root": nest(self, ROOT, &ep, &span),
            "unresolved_callees": self.unresolved,
        })
    }

    /// Basic node ids grouped by kind, for tests and diagnostics.
    pub fn node_ids(&self, kind: NodeKind) -> BTreeSet<String> {
        self.nodes.iter().filter(|n| n.kind == kind).map(|n| n.id.to_string()).collect()
    }
}

struct FunctionVars<'m> {
    contract: &'m ContractModel,
    function: &'m FunctionModel,
    cg: GraphId,
    fg: GraphId,
}

impl FunctionVars<'_> {
    fn node(&mut self, h: &mut HypernodeGraph, v: &VarRef) -> usize {
        let c = &self.contract.name;
        let f = &self.function.name;
        let (id, graph, kind, span) = match v.scope {
            Scope::State => (
                NodeId::new([c.as_str(), v.name.as_str()]),
                self.cg,
                NodeKind::State,
                self.contract.state_var(&v.name).and_then(|d| d.span),
            ),
            Scope::Builtin => {
                (NodeId::new([c.as_str(), f.as_str(), v.name.as_str()]), self.fg, NodeKind::Builtin, None)
            }
            Scope::Param | Scope::Local => {
                let decl = self.function.params.iter().chain(&self.function.locals).find(|d| d.name == v.name);
                let kind = if v.scope == Scope::Param { NodeKind::Param } else { NodeKind::Local };
                (NodeId::new([c.as_str(), f.as_str(), v.name.as_str()]), self.fg, kind, decl.and_then(|d| d.span))
            }
        };
        match h.find_node(&id) {
            Some(n) => n,
            None => h.add_node(graph, id, kind, span).expect("fresh node id"),
        }
    }

    fn external_sink(&mut self, h: &mut HypernodeGraph) -> usize {
        let id = NodeId::new([self.contract.name.as_str(), self.function.name.as_str(), EXTERNAL_SINK]);
        match h.find_node(&id) {
            Some(n) => n,
            None => h.add_node(self.fg, id, NodeKind::External, None).expect("fresh node id"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges_land_in_lowest_common_graph() {
        let mut h = HypernodeGraph::new();
        let c = h.add_graph(ROOT, "C", GraphKind::Contract, None).unwrap();
        let f = h.add_graph(c, "f", GraphKind::Function, None).unwrap();
        let g = h.add_graph(c, "g", GraphKind::Function, None).unwrap();
        let s = h.add_node(c, NodeId::new(["C", "s"]), NodeKind::State, None).unwrap();
        let x = h.add_node(f, NodeId::new(["C", "f", "x"]), NodeKind::Local, None).unwrap();
        let y = h.add_node(g, NodeId::new(["C", "g", "y"]), NodeKind::Local, None).unwrap();

        assert_eq!(h.edge_home(Endpoint::Node(x), Endpoint::Node(x)).unwrap(), f);
        assert_eq!(h.edge_home(Endpoint::Node(x), Endpoint::Node(s)).unwrap(), c);
        assert_eq!(h.edge_home(Endpoint::Node(x), Endpoint::Graph(g)).unwrap(), c);
        assert_eq!(h.edge_home(Endpoint::Graph(f), Endpoint::Node(x)).unwrap(), c);
        // Sibling function locals meet at the contract level.
        assert_eq!(h.edge_home(Endpoint::Node(x), Endpoint::Node(y)).unwrap(), c);
        // A root-level node is two levels above a function local.
        let r = h.add_node(ROOT, NodeId::new(["r"]), NodeKind::Local, None).unwrap();
        assert!(h.add_edge(Endpoint::Node(r), Endpoint::Node(x)).is_err());
        assert!(h.add_edge(Endpoint::Node(x), Endpoint::Node(s)).unwrap());
        assert!(!h.add_edge(Endpoint::Node(x), Endpoint::Node(s)).unwrap());
    }

    #[test]
    fn duplicate_node_ids_are_rejected() {
        let mut h = HypernodeGraph::new();
        h.add_node(ROOT, NodeId::new(["a"]), NodeKind::Local, None).unwrap();
        assert!(matches!(
            h.add_node(ROOT, NodeId::new(["a"]), NodeKind::Local, None),
            Err(HypergraphError::DuplicateNode(_))
        ));
    }

    #[test]
    fn unknown_graph_is_an_error() {
        let h = HypernodeGraph::new();
        assert_eq!(h.graph_of(GraphId(7)), Err(HypergraphError::UnknownGraph(7)));
        let root = h.graph_of(ROOT).unwrap();
        assert!(root.members.is_empty() && root.edges.is_empty());
    }
}
