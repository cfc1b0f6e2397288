//! Shared fixtures, generators and independent oracles for the integration
//! tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use graphviz_rust::dot_structures::{EdgeTy, Graph, Id, NodeId as DotNodeId, Stmt, Vertex};
use rand::seq::SliceRandom;
use rand::Rng;

use ponzilens::hypergraph::{Endpoint, GraphId, GraphKind, HypernodeGraph, NodeId, NodeKind};
use ponzilens::model::{
    CallSite, ContractKind, ContractModel, FunctionKind, FunctionModel, Scope, Span, Statement, StatementKind, VarRef,
    VariableDecl, Visibility,
};
use ponzilens::pipeline::{AnalysisOptions, StaticAnalysis};
use ponzilens::SourceUnit;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Every `<name>.ast.json` fixture, by name.
pub fn fixture_names() -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(fixtures_dir())
        .expect("fixtures directory")
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_suffix(".ast.json").map(str::to_string))
        .collect();
    names.sort();
    names
}

pub fn fixture_path(name: &str) -> PathBuf {
    fixtures_dir().join(format!("{name}.ast.json"))
}

pub fn load_fixture(name: &str) -> SourceUnit {
    SourceUnit::from_path(name, &fixture_path(name)).expect("fixture loads")
}

pub fn analyse_fixture(name: &str) -> StaticAnalysis {
    StaticAnalysis::run(load_fixture(name), AnalysisOptions::default()).expect("fixture analyses")
}

// ---------------------------------------------------------------------------
// Reachability oracle

/// Least fixed point of `T = sources ∪ {b | (a, b) ∈ edges, a ∈ T}` by plain
/// Kleene iteration, and the edges leaving `T`.
pub fn closure(
    sources: &BTreeSet<Endpoint>,
    edges: &[(Endpoint, Endpoint)],
) -> (BTreeSet<Endpoint>, BTreeSet<(Endpoint, Endpoint)>) {
    let mut tainted = sources.clone();
    loop {
        let next: BTreeSet<Endpoint> =
            tainted.iter().copied().chain(edges.iter().filter(|(a, _)| tainted.contains(a)).map(|(_, b)| *b)).collect();
        if next == tainted {
            break;
        }
        tainted = next;
    }
    let taint_edges = edges.iter().copied().filter(|(a, _)| tainted.contains(a)).collect();
    (tainted, taint_edges)
}

/// The oracle applied to every edge stored anywhere in `h`.
pub fn closure_of(
    h: &HypernodeGraph,
    sources: &BTreeSet<Endpoint>,
) -> (BTreeSet<Endpoint>, BTreeSet<(Endpoint, Endpoint)>) {
    let edges: Vec<_> = h.all_edges().map(|(_, a, b)| (a, b)).collect();
    closure(sources, &edges)
}

// ---------------------------------------------------------------------------
// Random hypernode graphs

/// Structure of a random graph: parent of each non-root graph, owning graph
/// of each basic node, and the accepted edges in generation order.
#[derive(Debug, Clone)]
pub struct GraphShape {
    pub parents: Vec<usize>,
    pub node_graphs: Vec<usize>,
    pub edges: Vec<(Endpoint, Endpoint)>,
}

fn depth(parents: &[usize], mut g: usize) -> usize {
    let mut d = 0;
    while g != 0 {
        g = parents[g - 1];
        d += 1;
    }
    d
}

impl GraphShape {
    /// At most `max_nodes` basic nodes, nesting depth at most `max_depth`.
    pub fn random(rng: &mut impl Rng, max_nodes: usize, max_depth: usize) -> Self {
        let graph_count = rng.gen_range(0..=10);
        let mut parents = Vec::new();
        for g in 0..graph_count {
            let candidates: Vec<usize> = (0..=g).filter(|&p| depth(&parents, p) < max_depth).collect();
            parents.push(*candidates.choose(rng).expect("root always qualifies"));
        }
        let node_count = rng.gen_range(1..=max_nodes);
        let node_graphs = (0..node_count).map(|_| rng.gen_range(0..=graph_count)).collect();
        let mut shape = GraphShape { parents, node_graphs, edges: Vec::new() };
        let probe = shape.build(&[]);
        let endpoints: Vec<Endpoint> =
            (0..node_count).map(Endpoint::Node).chain((1..=graph_count).map(|g| Endpoint::Graph(GraphId(g)))).collect();
        let wanted = rng.gen_range(0..=3 * node_count);
        let mut seen = BTreeSet::new();
        for _ in 0..wanted * 4 {
            if shape.edges.len() >= wanted {
                break;
            }
            let a = *endpoints.choose(rng).unwrap();
            let b = *endpoints.choose(rng).unwrap();
            if probe.edge_home(a, b).is_ok() && seen.insert((a, b)) {
                shape.edges.push((a, b));
            }
        }
        shape
    }

    /// Builds the graph, inserting `edges` in the given order.
    pub fn build(&self, edges: &[(Endpoint, Endpoint)]) -> HypernodeGraph {
        let mut h = HypernodeGraph::new();
        for (i, &p) in self.parents.iter().enumerate() {
            let g = h.add_graph(GraphId(p), format!("g{}", i + 1), GraphKind::Function, None).unwrap();
            assert_eq!(g, GraphId(i + 1));
        }
        for (i, &g) in self.node_graphs.iter().enumerate() {
            let n = h.add_node(GraphId(g), NodeId::new([format!("n{i}")]), NodeKind::Local, None).unwrap();
            assert_eq!(n, i);
        }
        for &(a, b) in edges {
            h.add_edge(a, b).unwrap();
        }
        h
    }

    pub fn shuffled_edges(&self, rng: &mut impl Rng) -> Vec<(Endpoint, Endpoint)> {
        let mut e = self.edges.clone();
        e.shuffle(rng);
        e
    }

    pub fn random_sources(&self, rng: &mut impl Rng) -> BTreeSet<Endpoint> {
        let mut s = BTreeSet::new();
        for _ in 0..rng.gen_range(1..=3) {
            s.insert(Endpoint::Node(rng.gen_range(0..self.node_graphs.len())));
        }
        if !self.parents.is_empty() && rng.gen_bool(0.2) {
            s.insert(Endpoint::Graph(GraphId(rng.gen_range(1..=self.parents.len()))));
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Random contract models

/// Random contracts with a consistent source text: every function and state
/// variable span points at its own text.
pub fn random_contracts(rng: &mut impl Rng) -> (Vec<ContractModel>, String) {
    let mut source = String::from("pragma solidity ^0.8.0;\n\n");
    let mut models = Vec::new();
    for ci in 0..rng.gen_range(1..=3) {
        let name = format!("C{ci}");
        source.push_str(&format!("contract {name} {{\n"));
        let contract_start = source.len() - format!("contract {name} {{\n").len();
        let mut state_vars = Vec::new();
        for si in 0..rng.gen_range(0..=4) {
            source.push_str("    ");
            let offset = source.len();
            let decl = format!("uint256 s{si}");
            source.push_str(&decl);
            state_vars.push(VariableDecl {
                name: format!("s{si}"),
                type_name: "uint256".into(),
                span: Some(Span { offset, length: decl.len() }),
                constant: false,
            });
            source.push_str(";\n");
        }
        let fn_count = rng.gen_range(1..=6);
        let has_ctor = rng.gen_bool(0.4);
        let names: Vec<String> =
            (0..fn_count).map(|i| if i == 0 && has_ctor { "@ctor".to_string() } else { format!("f{i}") }).collect();
        let mut functions = Vec::new();
        for (fi, fname) in names.iter().enumerate() {
            let params: Vec<VariableDecl> = (0..rng.gen_range(0..=2))
                .map(|p| VariableDecl {
                    name: format!("p{p}"),
                    type_name: "uint256".into(),
                    span: None,
                    constant: false,
                })
                .collect();
            let var = |rng: &mut dyn rand::RngCore, for_def: bool| -> VarRef {
                loop {
                    let v = match rng.gen_range(0..5) {
                        0 if !state_vars.is_empty() => {
                            VarRef::state(state_vars[rng.gen_range(0..state_vars.len())].name.clone())
                        }
                        1 if !params.is_empty() => VarRef::param(params[rng.gen_range(0..params.len())].name.clone()),
                        2 => VarRef::local(format!("l{}", rng.gen_range(0..3))),
                        3 if !for_def => {
                            if rng.gen_bool(0.5) {
                                VarRef::msg_sender()
                            } else {
                                VarRef::msg_value()
                            }
                        }
                        4 => VarRef::local(format!("l{}", rng.gen_range(0..3))),
                        _ => continue,
                    };
                    return v;
                }
            };
            let mut statements = Vec::new();
            for _ in 0..rng.gen_range(0..=5) {
                let defs: BTreeSet<VarRef> = (0..rng.gen_range(0..=1)).map(|_| var(rng, true)).collect();
                let uses: BTreeSet<VarRef> = (0..rng.gen_range(0..=2)).map(|_| var(rng, false)).collect();
                let mut calls = Vec::new();
                let kind = if rng.gen_bool(0.2) {
                    let callee = names[rng.gen_range(0..names.len())].clone();
                    let resolved = rng.gen_bool(0.7) && callee != "@ctor";
                    calls.push(CallSite { callee, resolved, args: uses.clone() });
                    StatementKind::Call
                } else if rng.gen_bool(0.15) {
                    StatementKind::Return
                } else {
                    StatementKind::Assign
                };
                statements.push(Statement { kind, defs, uses, calls, source_span: None, parent: None });
            }
            source.push_str("    ");
            let offset = source.len();
            let header = if fname == "@ctor" { "constructor()".to_string() } else { format!("function {fname}()") };
            let body: String = (0..rng.gen_range(1..=4)).map(|k| format!("        op{fi}_{k}();\n")).collect();
            let text = format!("{header} {{\n{body}    }}");
            source.push_str(&text);
            source.push('\n');
            functions.push(FunctionModel {
                name: fname.clone(),
                kind: if fname == "@ctor" { FunctionKind::Constructor } else { FunctionKind::Function },
                visibility: Visibility::Public,
                payable: false,
                params,
                locals: Vec::new(),
                statements,
                source_span: Some(Span { offset, length: text.len() }),
                defined_in: name.clone(),
                modifiers: Vec::new(),
            });
        }
        source.push_str("}\n\n");
        models.push(ContractModel {
            name,
            kind: ContractKind::Contract,
            state_vars,
            functions,
            inherits: Vec::new(),
            structs: Vec::new(),
            events: Vec::new(),
            modifiers: Vec::new(),
            source_span: Some(Span { offset: contract_start, length: source.len() - contract_start }),
        });
    }
    (models, source)
}

/// Node id a variable of `f` maps to: state variables are per contract,
/// everything else per function.
pub fn var_node(h: &HypernodeGraph, c: &ContractModel, f: &FunctionModel, v: &VarRef) -> Option<usize> {
    let id = match v.scope {
        Scope::State => NodeId::new([c.name.as_str(), v.name.as_str()]),
        _ => NodeId::new([c.name.as_str(), f.name.as_str(), v.name.as_str()]),
    };
    h.find_node(&id)
}

/// `{Contract.f : def/use(f) ∩ tainted ≠ ∅}`, plus constructors of contracts
/// with a tainted state variable when `with_ctors`.
pub fn expected_selection(
    h: &HypernodeGraph,
    models: &[ContractModel],
    tainted: &BTreeSet<Endpoint>,
    with_ctors: bool,
) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for c in models {
        let state_tainted = c.state_vars.iter().any(|v| {
            h.find_node(&NodeId::new([c.name.as_str(), v.name.as_str()]))
                .is_some_and(|n| tainted.contains(&Endpoint::Node(n)))
        });
        for f in &c.functions {
            let touches = f
                .statements
                .iter()
                .flat_map(|s| s.defs.iter().chain(&s.uses))
                .filter_map(|v| var_node(h, c, f, v))
                .any(|n| tainted.contains(&Endpoint::Node(n)));
            if touches || (with_ctors && state_tainted && f.kind == FunctionKind::Constructor) {
                out.insert(format!("{}.{}", c.name, f.name));
            }
        }
    }
    out
}

/// Builtin source nodes, found by id suffix.
pub fn builtin_sources(h: &HypernodeGraph) -> BTreeSet<Endpoint> {
    h.nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| {
            n.kind == NodeKind::Builtin && matches!(n.id.0.last().map(String::as_str), Some("msg.sender" | "msg.value"))
        })
        .map(|(i, _)| Endpoint::Node(i))
        .collect()
}

// ---------------------------------------------------------------------------
// DOT

fn unquote(id: &Id) -> String {
    match id {
        Id::Escaped(s) => {
            let inner = s.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(s);
            let mut out = String::new();
            let mut chars = inner.chars();
            while let Some(c) = chars.next() {
                if c == '\\' {
                    match chars.next() {
                        Some('n') => out.push('\n'),
                        Some(x) => out.push(x),
                        None => out.push('\\'),
                    }
                } else {
                    out.push(c);
                }
            }
            out
        }
        Id::Plain(s) | Id::Html(s) | Id::Anonymous(s) => s.clone(),
    }
}

fn vertex_name(v: &Vertex) -> String {
    match v {
        Vertex::N(DotNodeId(id, _)) => unquote(id),
        Vertex::S(_) => panic!("subgraph used as an edge endpoint"),
    }
}

fn collect_stmts(stmts: &[Stmt], nodes: &mut BTreeSet<String>, edges: &mut Vec<(String, String)>) {
    for s in stmts {
        match s {
            Stmt::Node(n) => {
                nodes.insert(unquote(&n.id.0));
            }
            Stmt::Edge(e) => match &e.ty {
                EdgeTy::Pair(a, b) => edges.push((vertex_name(a), vertex_name(b))),
                EdgeTy::Chain(vs) => {
                    for w in vs.windows(2) {
                        edges.push((vertex_name(&w[0]), vertex_name(&w[1])));
                    }
                }
            },
            Stmt::Subgraph(sg) => collect_stmts(&sg.stmts, nodes, edges),
            _ => {}
        }
    }
}

/// Declared node ids and the edge multiset (sorted) of a DOT document.
pub type DotContents = (BTreeSet<String>, Vec<(String, String)>);

pub fn parse_dot(text: &str) -> Result<DotContents, String> {
    let graph = graphviz_rust::parse(text)?;
    let stmts = match &graph {
        Graph::DiGraph { stmts, .. } => stmts,
        Graph::Graph { .. } => return Err("expected a digraph".into()),
    };
    let mut nodes = BTreeSet::new();
    let mut edges = Vec::new();
    collect_stmts(stmts, &mut nodes, &mut edges);
    edges.sort();
    Ok((nodes, edges))
}

/// Taint edges of an analysis as labelled pairs, merged and sorted.
pub fn labelled_taint_edges(h: &HypernodeGraph, edges: &BTreeSet<(Endpoint, Endpoint)>) -> Vec<(String, String)> {
    let merged: BTreeMap<(String, String), ()> =
        edges.iter().map(|&(a, b)| ((h.endpoint_label(a), h.endpoint_label(b)), ())).collect();
    merged.into_keys().collect()
}
