use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use super::{
    CallSite, ContractKind, ContractModel, FunctionKind, FunctionModel, NamedSpan, Scope, Span, Statement,
    StatementKind, VarRef, VariableDecl, Visibility, MSG_SENDER, MSG_VALUE,
};
use crate::ingest::SourceUnit;

#[derive(Debug, Error)]
pub enum LowerError {
    #[error("unit has no AST; compile or load it first")]
    MissingAst,
    #[error("malformed AST: {0}")]
    MalformedAst(String),
}

fn node_type(v: &Value) -> &str {
    v.get("nodeType").and_then(Value::as_str).unwrap_or("")
}

fn str_field<'v>(v: &'v Value, key: &str) -> Option<&'v str> {
    v.get(key).and_then(Value::as_str)
}

fn list<'v>(v: &'v Value, key: &str) -> &'v [Value] {
    v.get(key).and_then(Value::as_array).map(Vec::as_slice).unwrap_or(&[])
}

fn node_id(v: &Value) -> Option<i64> {
    v.get("id").and_then(Value::as_i64)
}

fn referenced(v: &Value) -> Option<i64> {
    v.get("referencedDeclaration").and_then(Value::as_i64)
}

/// Builtins (`require`, `keccak256`, ...) reference negative declaration
/// ids, which newer compilers print as their unsigned 32-bit wrap.
fn is_builtin_declaration(id: i64) -> bool {
    !(0..1 << 31).contains(&id)
}

fn type_string(v: &Value) -> Option<&str> {
    v.get("typeDescriptions").and_then(|t| t.get("typeString")).and_then(Value::as_str)
}

fn params_of<'v>(v: &'v Value, key: &str) -> Vec<&'v Value> {
    v.get(key).map(|p| list(p, "parameters").iter().collect()).unwrap_or_default()
}

struct SpanMapper<'u> {
    unit: &'u SourceUnit,
}

impl SpanMapper<'_> {
    fn span(&self, v: &Value) -> Option<Span> {
        let src = str_field(v, "src")?;
        let mut parts = src.split(':');
        let start: usize = parts.next()?.parse().ok()?;
        let length: usize = parts.next()?.parse().ok()?;
        let file: i64 = parts.next().and_then(|f| f.parse().ok()).unwrap_or(0);
        let (offset, length) = self.unit.resolve_src(start, length, file)?;
        Some(Span { offset, length })
    }

    fn text(&self, v: &Value) -> Option<&str> {
        self.span(v).and_then(|s| s.text(&self.unit.source_text))
    }
}

/// Declarations visible while lowering one contract, inherited ones included.
struct ContractCtx<'a> {
    name: String,
    state_ids: HashMap<i64, String>,
    state_names: BTreeSet<String>,
    /// FunctionDefinition id (any in the linearisation) -> function id.
    func_ids: HashMap<i64, String>,
    func_names: HashMap<String, Vec<String>>,
    event_ids: BTreeSet<i64>,
    event_names: BTreeSet<String>,
    modifiers: HashMap<String, &'a Value>,
    modifier_ids: HashMap<i64, &'a Value>,
    /// Ids of contracts, structs, enums: identifiers that are not variables.
    type_ids: BTreeSet<i64>,
}

/// Lowers every contract definition in `unit` into a [`ContractModel`].
pub fn lower(unit: &SourceUnit) -> Result<Vec<ContractModel>, LowerError> {
    if unit.ast_json.is_none() {
        return Err(LowerError::MissingAst);
    }
    let mapper = SpanMapper { unit };

    let mut contracts: Vec<(i64, &Value)> = Vec::new();
    for (_, file_id, ast) in unit.ast_sources() {
        for node in list(ast, "nodes") {
            if node_type(node) == "ContractDefinition" {
                contracts.push((file_id, node));
            }
        }
    }
    let by_id: HashMap<i64, &Value> = contracts.iter().filter_map(|(_, c)| Some((node_id(c)?, *c))).collect();
    let by_name: HashMap<&str, &Value> =
        contracts.iter().filter_map(|(_, c)| Some((str_field(c, "name")?, *c))).collect();

    let mut type_ids = BTreeSet::new();
    for (_, c) in &contracts {
        type_ids.extend(node_id(c));
        for member in list(c, "nodes") {
            if matches!(node_type(member), "StructDefinition" | "EnumDefinition" | "UserDefinedValueTypeDefinition") {
                type_ids.extend(node_id(member));
            }
        }
    }

    let mut models = Vec::with_capacity(contracts.len());
    for (_, contract) in &contracts {
        let name = str_field(contract, "name")
            .ok_or_else(|| LowerError::MalformedAst("ContractDefinition without a name".into()))?
            .to_string();
        if !contract.get("nodes").is_some_and(Value::is_array) {
            return Err(LowerError::MalformedAst(format!("contract `{name}` has no member list")));
        }
        let linearised = linearisation(contract, &by_id, &by_name);
        models.push(lower_contract(&mapper, contract, &name, &linearised, &type_ids)?);
    }
    Ok(models)
}

/// The contract followed by its bases present in the unit, most-derived first.
fn linearisation<'a>(
    contract: &'a Value,
    by_id: &HashMap<i64, &'a Value>,
    by_name: &HashMap<&str, &'a Value>,
) -> Vec<&'a Value> {
    let ids = list(contract, "linearizedBaseContracts");
    if !ids.is_empty() {
        return ids.iter().filter_map(Value::as_i64).filter_map(|id| by_id.get(&id).copied()).collect();
    }
    let mut out = vec![contract];
    for base in list(contract, "baseContracts") {
        if let Some(c) = base.get("baseName").and_then(|b| str_field(b, "name")).and_then(|n| by_name.get(n)) {
            out.push(c);
        }
    }
    out
}

fn function_kind(f: &Value) -> FunctionKind {
    match str_field(f, "kind") {
        Some("constructor") => FunctionKind::Constructor,
        Some("fallback") => FunctionKind::Fallback,
        Some("receive") => FunctionKind::Receive,
        Some(_) => FunctionKind::Function,
        None if f.get("isConstructor").and_then(Value::as_bool) == Some(true) => FunctionKind::Constructor,
        None if str_field(f, "name") == Some("") => FunctionKind::Fallback,
        None => FunctionKind::Function,
    }
}

fn param_types(f: &Value) -> Vec<String> {
    params_of(f, "parameters")
        .iter()
        .map(|p| {
            type_string(p)
                .or_else(|| p.get("typeName").and_then(|t| str_field(t, "name")))
                .unwrap_or("?")
                .split_whitespace()
                .next()
                .unwrap_or("?")
                .to_string()
        })
        .collect()
}

fn variable_decl(mapper: &SpanMapper, v: &Value) -> VariableDecl {
    VariableDecl {
        name: str_field(v, "name").unwrap_or_default().to_string(),
        type_name: type_string(v)
            .or_else(|| v.get("typeName").and_then(|t| str_field(t, "name")))
            .unwrap_or_default()
            .to_string(),
        span: mapper.span(v),
        constant: v.get("constant").and_then(Value::as_bool).unwrap_or(false)
            || str_field(v, "mutability").is_some_and(|m| m == "constant" || m == "immutable"),
    }
}

fn lower_contract(
    mapper: &SpanMapper,
    contract: &Value,
    name: &str,
    linearised: &[&Value],
    type_ids: &BTreeSet<i64>,
) -> Result<ContractModel, LowerError> {
    let kind = match str_field(contract, "contractKind") {
        Some("library") => ContractKind::Library,
        Some("interface") => ContractKind::Interface,
        _ => ContractKind::Contract,
    };

    // State variables, base-most first; a later declaration shadows an
    // earlier one of the same name.
    let mut state_vars: Vec<(VariableDecl, &Value)> = Vec::new();
    let mut state_ids = HashMap::new();
    for base in linearised.iter().rev() {
        for member in list(base, "nodes") {
            if node_type(member) == "VariableDeclaration" {
                let decl = variable_decl(mapper, member);
                if let Some(id) = node_id(member) {
                    state_ids.insert(id, decl.name.clone());
                }
                state_vars.retain(|(d, _)| d.name != decl.name);
                state_vars.push((decl, member));
            }
        }
    }

    // Functions, most-derived first so overrides win.
    let mut chosen: Vec<(String, &Value, &str)> = Vec::new();
    let mut by_signature: HashMap<(String, Vec<String>), usize> = HashMap::new();
    let mut func_decl_ids: HashMap<i64, usize> = HashMap::new();
    let mut modifiers: HashMap<String, &Value> = HashMap::new();
    let mut modifier_ids = HashMap::new();
    let mut event_ids = BTreeSet::new();
    let mut event_names = BTreeSet::new();
    let mut structs = Vec::new();
    let mut events = Vec::new();
    let mut modifier_spans = Vec::new();
    for base in linearised {
        let base_name = str_field(base, "name").unwrap_or_default();
        let is_self = std::ptr::eq(*base, contract);
        for member in list(base, "nodes") {
            match node_type(member) {
                "FunctionDefinition" => {
                    let kind = function_kind(member);
                    let fname = str_field(member, "name")
                        .ok_or_else(|| LowerError::MalformedAst(format!("function without a name in `{base_name}`")))?;
                    let key = match kind {
                        FunctionKind::Constructor if is_self => ("@ctor".to_string(), vec![]),
                        FunctionKind::Constructor => (format!("@ctor.{base_name}"), vec![]),
                        FunctionKind::Fallback => ("@fallback".to_string(), vec![]),
                        FunctionKind::Receive => ("@receive".to_string(), vec![]),
                        FunctionKind::Function => (fname.to_string(), param_types(member)),
                    };
                    let slot = match by_signature.get(&key) {
                        Some(&slot) => slot,
                        None => {
                            chosen.push((key.0.clone(), member, base_name));
                            by_signature.insert(key, chosen.len() - 1);
                            chosen.len() - 1
                        }
                    };
                    if let Some(id) = node_id(member) {
                        func_decl_ids.insert(id, slot);
                    }
                }
                "ModifierDefinition" => {
                    let mname = str_field(member, "name").unwrap_or_default().to_string();
                    if let Some(id) = node_id(member) {
                        modifier_ids.insert(id, member);
                    }
                    if let std::collections::hash_map::Entry::Vacant(slot) = modifiers.entry(mname.clone()) {
                        modifier_spans.push(NamedSpan { name: mname, span: mapper.span(member) });
                        slot.insert(member);
                    }
                }
                "EventDefinition" => {
                    let ename = str_field(member, "name").unwrap_or_default().to_string();
                    event_ids.extend(node_id(member));
                    if event_names.insert(ename.clone()) {
                        events.push(NamedSpan { name: ename, span: mapper.span(member) });
                    }
                }
                "StructDefinition" | "EnumDefinition" => {
                    let sname = str_field(member, "name").unwrap_or_default().to_string();
                    if !structs.iter().any(|s: &NamedSpan| s.name == sname) {
                        structs.push(NamedSpan { name: sname, span: mapper.span(member) });
                    }
                }
                _ => {}
            }
        }
    }

    // Overloads get `name(type,...)` ids.
    let mut name_counts: HashMap<&str, usize> = HashMap::new();
    for (fid, _, _) in &chosen {
        *name_counts.entry(fid.as_str()).or_default() += 1;
    }
    let ids: Vec<String> = chosen
        .iter()
        .map(|(fid, node, _)| {
            if name_counts[fid.as_str()] > 1 {
                format!("{fid}({})", param_types(node).join(","))
            } else {
                fid.clone()
            }
        })
        .collect();
    let func_ids: HashMap<i64, String> = func_decl_ids.iter().map(|(id, slot)| (*id, ids[*slot].clone())).collect();
    let mut func_names: HashMap<String, Vec<String>> = HashMap::new();
    for ((fid, _, _), id) in chosen.iter().zip(&ids) {
        func_names.entry(fid.clone()).or_default().push(id.clone());
    }

    let cx = ContractCtx {
        name: name.to_string(),
        state_names: state_vars.iter().map(|(d, _)| d.name.clone()).collect(),
        state_ids,
        func_ids,
        func_names,
        event_ids,
        event_names,
        modifiers,
        modifier_ids,
        type_ids: type_ids.clone(),
    };

    let initialisers: Vec<&Value> =
        state_vars.iter().map(|(_, node)| *node).filter(|n| n.get("value").is_some_and(|v| !v.is_null())).collect();
    let mut functions = Vec::with_capacity(chosen.len() + 1);
    let mut has_own_ctor = false;
    for ((_, node, defined_in), id) in chosen.iter().zip(&ids) {
        let is_own_ctor = id == "@ctor";
        has_own_ctor |= is_own_ctor;
        let inits: &[&Value] = if is_own_ctor { &initialisers } else { &[] };
        functions.push(FnLowerer::new(mapper, &cx).lower_function(node, id, defined_in, inits));
    }
    if !has_own_ctor {
        let mut lowerer = FnLowerer::new(mapper, &cx);
        lowerer.lower_initialisers(&initialisers);
        if !lowerer.statements.is_empty() {
            functions.push(lowerer.finish_synthetic_ctor(name));
        }
    }
    functions.sort_by_key(|f| f.source_span.map_or((0, 0), |s| (1, s.offset)));

    Ok(ContractModel {
        name: name.to_string(),
        kind,
        state_vars: state_vars.into_iter().map(|(d, _)| d).collect(),
        functions,
        inherits: list(contract, "baseContracts")
            .iter()
            .filter_map(|b| b.get("baseName").and_then(|n| str_field(n, "name")).map(str::to_string))
            .collect(),
        structs,
        events,
        modifiers: modifier_spans,
        source_span: mapper.span(contract),
    })
}

#[derive(Default)]
struct Acc {
    defs: BTreeSet<VarRef>,
    uses: BTreeSet<VarRef>,
    calls: Vec<CallSite>,
    transfer: bool,
    event: bool,
}

struct FnLowerer<'a, 'u> {
    mapper: &'a SpanMapper<'u>,
    cx: &'a ContractCtx<'a>,
    vars: HashMap<i64, VarRef>,
    by_name: HashMap<String, VarRef>,
    params: Vec<VariableDecl>,
    locals: Vec<VariableDecl>,
    statements: Vec<Statement>,
    /// Modifier (definition, invocation) pairs of the function being lowered.
    chain: Vec<(&'a Value, &'a Value)>,
    /// Pending placeholder continuations: next chain position and body.
    continuations: Vec<Option<(usize, Option<&'a Value>)>>,
}

impl<'a, 'u> FnLowerer<'a, 'u> {
    fn new(mapper: &'a SpanMapper<'u>, cx: &'a ContractCtx<'a>) -> Self {
        FnLowerer {
            mapper,
            cx,
            vars: HashMap::new(),
            by_name: HashMap::new(),
            params: Vec::new(),
            locals: Vec::new(),
            statements: Vec::new(),
            chain: Vec::new(),
            continuations: Vec::new(),
        }
    }

    fn lower_function(mut self, node: &'a Value, id: &str, defined_in: &str, inits: &[&'a Value]) -> FunctionModel {
        self.lower_initialisers(inits);
        for p in params_of(node, "parameters") {
            self.declare(p, Scope::Param);
        }
        for p in params_of(node, "returnParameters") {
            if !str_field(p, "name").unwrap_or_default().is_empty() {
                self.declare(p, Scope::Local);
            }
        }
        let mut modifier_names = Vec::new();
        for inv in list(node, "modifiers") {
            let Some(name_node) = inv.get("modifierName") else { continue };
            let mname = str_field(name_node, "name").unwrap_or_default();
            let def = referenced(name_node)
                .and_then(|id| self.cx.modifier_ids.get(&id).copied())
                .filter(|d| str_field(d, "name") == Some(mname))
                .and_then(|d| self.cx.modifiers.get(mname).copied().or(Some(d)))
                .or_else(|| self.cx.modifiers.get(mname).copied());
            if let Some(def) = def {
                modifier_names.push(mname.to_string());
                self.chain.push((def, inv));
            }
        }
        let body = node.get("body").filter(|b| !b.is_null());
        self.lower_chain(0, body, None);

        FunctionModel {
            name: id.to_string(),
            kind: function_kind(node),
            visibility: match str_field(node, "visibility") {
                Some("external") => Visibility::External,
                Some("internal") => Visibility::Internal,
                Some("private") => Visibility::Private,
                _ => Visibility::Public,
            },
            payable: node.get("payable").and_then(Value::as_bool).unwrap_or(false)
                || str_field(node, "stateMutability") == Some("payable"),
            params: self.params,
            locals: self.locals,
            statements: self.statements,
            source_span: self.mapper.span(node),
            defined_in: defined_in.to_string(),
            modifiers: modifier_names,
        }
    }

    fn finish_synthetic_ctor(self, contract: &str) -> FunctionModel {
        FunctionModel {
            name: "@ctor".into(),
            kind: FunctionKind::Constructor,
            visibility: Visibility::Public,
            payable: false,
            params: self.params,
            locals: self.locals,
            statements: self.statements,
            source_span: None,
            defined_in: contract.to_string(),
            modifiers: Vec::new(),
        }
    }

    /// State variable initialisers that read something become declare
    /// statements at the start of the constructor.
    fn lower_initialisers(&mut self, inits: &[&'a Value]) {
        for node in inits {
            let Some(value) = node.get("value") else { continue };
            let mut acc = Acc::default();
            self.expr(value, &mut acc);
            if acc.uses.is_empty() && acc.calls.is_empty() {
                continue;
            }
            acc.defs.insert(VarRef::state(str_field(node, "name").unwrap_or_default()));
            let kind = if acc.transfer { StatementKind::ValueTransfer } else { StatementKind::Declare };
            self.push(kind, acc, node, None);
        }
    }

    fn declare(&mut self, decl: &Value, scope: Scope) -> Option<VarRef> {
        let name = str_field(decl, "name").filter(|n| !n.is_empty())?;
        let var = VarRef { scope, name: name.to_string() };
        if let Some(id) = node_id(decl) {
            self.vars.insert(id, var.clone());
        }
        let first = !self.by_name.contains_key(name);
        self.by_name.insert(name.to_string(), var.clone());
        if first {
            let d = variable_decl(self.mapper, decl);
            match scope {
                Scope::Param => self.params.push(d),
                _ => self.locals.push(d),
            }
        }
        Some(var)
    }

    fn push(&mut self, kind: StatementKind, acc: Acc, node: &Value, parent: Option<usize>) -> usize {
        self.statements.push(Statement {
            kind,
            defs: acc.defs,
            uses: acc.uses,
            calls: acc.calls,
            source_span: self.mapper.span(node),
            parent,
        });
        self.statements.len() - 1
    }

    fn lower_chain(&mut self, pos: usize, body: Option<&'a Value>, parent: Option<usize>) {
        match self.chain.get(pos).copied() {
            None => {
                if let Some(body) = body {
                    self.stmt(body, parent);
                }
            }
            Some((def, inv)) => {
                let formals = params_of(def, "parameters");
                let actuals = list(inv, "arguments");
                for (formal, actual) in formals.iter().zip(actuals) {
                    let mut acc = Acc::default();
                    self.expr(actual, &mut acc);
                    if let Some(var) = self.declare(formal, Scope::Local) {
                        acc.defs.insert(var);
                    }
                    self.push(StatementKind::Declare, acc, inv, parent);
                }
                self.continuations.push(Some((pos + 1, body)));
                if let Some(mbody) = def.get("body").filter(|b| !b.is_null()) {
                    self.stmt(mbody, parent);
                }
                self.continuations.pop();
            }
        }
    }

    fn stmt(&mut self, s: &'a Value, parent: Option<usize>) {
        match node_type(s) {
            "Block" | "UncheckedBlock" => {
                for inner in list(s, "statements") {
                    self.stmt(inner, parent);
                }
            }
            "ExpressionStatement" => {
                let Some(e) = s.get("expression") else { return };
                let mut acc = Acc::default();
                self.expr(e, &mut acc);
                let kind = if acc.transfer {
                    StatementKind::ValueTransfer
                } else {
                    match node_type(e) {
                        "Assignment" | "UnaryOperation" => StatementKind::Assign,
                        "FunctionCall" if acc.event => StatementKind::Emit,
                        "FunctionCall" => StatementKind::Call,
                        _ if !acc.defs.is_empty() => StatementKind::Assign,
                        _ => StatementKind::Call,
                    }
                };
                self.push(kind, acc, s, parent);
            }
            "VariableDeclarationStatement" => {
                let mut acc = Acc::default();
                if let Some(init) = s.get("initialValue").filter(|v| !v.is_null()) {
                    self.expr(init, &mut acc);
                }
                for decl in list(s, "declarations") {
                    if decl.is_null() {
                        continue;
                    }
                    if let Some(var) = self.declare(decl, Scope::Local) {
                        acc.defs.insert(var);
                    }
                }
                let kind = if acc.transfer { StatementKind::ValueTransfer } else { StatementKind::Declare };
                self.push(kind, acc, s, parent);
            }
            "IfStatement" => {
                let mut acc = Acc::default();
                if let Some(c) = s.get("condition") {
                    self.expr(c, &mut acc);
                }
                let idx = self.push(StatementKind::Branch, acc, s, parent);
                for key in ["trueBody", "falseBody"] {
                    if let Some(b) = s.get(key).filter(|b| !b.is_null()) {
                        self.stmt(b, Some(idx));
                    }
                }
            }
            "WhileStatement" | "DoWhileStatement" => {
                let mut acc = Acc::default();
                if let Some(c) = s.get("condition") {
                    self.expr(c, &mut acc);
                }
                let idx = self.push(StatementKind::Loop, acc, s, parent);
                if let Some(b) = s.get("body") {
                    self.stmt(b, Some(idx));
                }
            }
            "ForStatement" => {
                if let Some(init) = s.get("initializationExpression").filter(|v| !v.is_null()) {
                    self.stmt(init, parent);
                }
                let mut acc = Acc::default();
                if let Some(c) = s.get("condition").filter(|v| !v.is_null()) {
                    self.expr(c, &mut acc);
                }
                let idx = self.push(StatementKind::Loop, acc, s, parent);
                if let Some(b) = s.get("body") {
                    self.stmt(b, Some(idx));
                }
                if let Some(step) = s.get("loopExpression").filter(|v| !v.is_null()) {
                    self.stmt(step, Some(idx));
                }
            }
            "Return" => {
                let mut acc = Acc::default();
                if let Some(e) = s.get("expression").filter(|v| !v.is_null()) {
                    self.expr(e, &mut acc);
                }
                let kind = if acc.transfer { StatementKind::ValueTransfer } else { StatementKind::Return };
                self.push(kind, acc, s, parent);
            }
            "EmitStatement" => {
                let mut acc = Acc::default();
                if let Some(call) = s.get("eventCall") {
                    for a in list(call, "arguments") {
                        self.expr(a, &mut acc);
                    }
                }
                self.push(StatementKind::Emit, acc, s, parent);
            }
            "RevertStatement" => {
                let mut acc = Acc::default();
                if let Some(call) = s.get("errorCall") {
                    for a in list(call, "arguments") {
                        self.expr(a, &mut acc);
                    }
                }
                self.push(StatementKind::Call, acc, s, parent);
            }
            "TryStatement" => {
                let mut acc = Acc::default();
                if let Some(call) = s.get("externalCall") {
                    self.expr(call, &mut acc);
                }
                let clauses = list(s, "clauses");
                for clause in clauses {
                    for p in params_of(clause, "parameters") {
                        if let Some(var) = self.declare(p, Scope::Local) {
                            acc.defs.insert(var);
                        }
                    }
                }
                let kind = if acc.transfer { StatementKind::ValueTransfer } else { StatementKind::Branch };
                let idx = self.push(kind, acc, s, parent);
                for clause in clauses {
                    if let Some(b) = clause.get("block") {
                        self.stmt(b, Some(idx));
                    }
                }
            }
            "PlaceholderStatement" => {
                let Some(slot) = self.continuations.last_mut() else { return };
                if let Some((rest, body)) = slot.take() {
                    let saved = self.continuations.pop();
                    self.lower_chain(rest, body, parent);
                    self.continuations.push(saved.flatten());
                }
            }
            "Break" | "Continue" | "Throw" => {}
            _ => {
                let acc = Acc { uses: self.textual_uses(s), ..Acc::default() };
                self.push(StatementKind::Opaque, acc, s, parent);
            }
        }
    }

    fn resolve_ident(&self, e: &Value) -> Option<VarRef> {
        if let Some(id) = referenced(e) {
            if let Some(v) = self.vars.get(&id) {
                return Some(v.clone());
            }
            if let Some(name) = self.cx.state_ids.get(&id) {
                return Some(VarRef::state(name.clone()));
            }
            if self.cx.func_ids.contains_key(&id) || self.cx.event_ids.contains(&id) || self.cx.type_ids.contains(&id) {
                return None;
            }
        }
        let name = str_field(e, "name")?;
        if let Some(v) = self.by_name.get(name) {
            return Some(v.clone());
        }
        self.cx.state_names.contains(name).then(|| VarRef::state(name))
    }

    fn builtin(e: &Value) -> Option<VarRef> {
        if node_type(e) != "MemberAccess" {
            return None;
        }
        let base = e.get("expression")?;
        if node_type(base) != "Identifier" || str_field(base, "name") != Some("msg") {
            return None;
        }
        match str_field(e, "memberName")? {
            "sender" => Some(VarRef::msg_sender()),
            "value" => Some(VarRef::msg_value()),
            _ => None,
        }
    }

    fn is_magic_base(&self, e: &Value) -> bool {
        node_type(e) == "Identifier"
            && (matches!(str_field(e, "name"), Some("msg" | "block" | "tx" | "abi" | "this" | "super" | "type"))
                || referenced(e).is_some_and(|id| self.cx.type_ids.contains(&id)))
    }

    fn expr(&mut self, e: &'a Value, acc: &mut Acc) {
        match node_type(e) {
            "Identifier" => {
                if let Some(v) = self.resolve_ident(e) {
                    acc.uses.insert(v);
                }
            }
            "MemberAccess" => {
                if let Some(b) = Self::builtin(e) {
                    acc.uses.insert(b);
                } else if let Some(base) = e.get("expression") {
                    if !self.is_magic_base(base) {
                        self.expr(base, acc);
                    }
                }
            }
            "IndexAccess" => {
                for key in ["baseExpression", "indexExpression"] {
                    if let Some(x) = e.get(key).filter(|v| !v.is_null()) {
                        self.expr(x, acc);
                    }
                }
            }
            "IndexRangeAccess" => {
                for key in ["baseExpression", "startExpression", "endExpression"] {
                    if let Some(x) = e.get(key).filter(|v| !v.is_null()) {
                        self.expr(x, acc);
                    }
                }
            }
            "Assignment" => {
                let compound = str_field(e, "operator").is_some_and(|op| op != "=");
                if let Some(lhs) = e.get("leftHandSide") {
                    self.lvalue(lhs, acc, compound);
                }
                if let Some(rhs) = e.get("rightHandSide") {
                    self.expr(rhs, acc);
                }
            }
            "UnaryOperation" => {
                let Some(sub) = e.get("subExpression") else { return };
                match str_field(e, "operator") {
                    Some("++" | "--") => self.lvalue(sub, acc, true),
                    Some("delete") => self.lvalue(sub, acc, false),
                    _ => self.expr(sub, acc),
                }
            }
            "BinaryOperation" => {
                for key in ["leftExpression", "rightExpression"] {
                    if let Some(x) = e.get(key) {
                        self.expr(x, acc);
                    }
                }
            }
            "Conditional" => {
                for key in ["condition", "trueExpression", "falseExpression"] {
                    if let Some(x) = e.get(key) {
                        self.expr(x, acc);
                    }
                }
            }
            "TupleExpression" | "InlineArrayExpression" => {
                for c in list(e, "components") {
                    if !c.is_null() {
                        self.expr(c, acc);
                    }
                }
            }
            "FunctionCall" => self.call(e, acc),
            "FunctionCallOptions" => {
                for o in list(e, "options") {
                    self.expr(o, acc);
                }
                if let Some(x) = e.get("expression") {
                    self.expr(x, acc);
                }
            }
            "NewExpression" | "Literal" | "ElementaryTypeNameExpression" | "IdentifierPath" => {}
            _ => {
                let uses = self.textual_uses(e);
                acc.uses.extend(uses);
            }
        }
    }

    /// Records the base variable of an assignment target as defined.
    fn lvalue(&mut self, e: &'a Value, acc: &mut Acc, compound: bool) {
        match node_type(e) {
            "Identifier" => {
                if let Some(v) = self.resolve_ident(e) {
                    if !v.is_builtin() {
                        if compound {
                            acc.uses.insert(v.clone());
                        }
                        acc.defs.insert(v);
                    }
                }
            }
            "IndexAccess" => {
                if let Some(base) = e.get("baseExpression") {
                    self.lvalue(base, acc, compound);
                }
                if let Some(idx) = e.get("indexExpression").filter(|v| !v.is_null()) {
                    self.expr(idx, acc);
                }
            }
            "MemberAccess" => {
                if Self::builtin(e).is_some() {
                    return;
                }
                if let Some(base) = e.get("expression") {
                    if !self.is_magic_base(base) {
                        self.lvalue(base, acc, compound);
                    }
                }
            }
            "TupleExpression" => {
                for c in list(e, "components") {
                    if !c.is_null() {
                        self.lvalue(c, acc, compound);
                    }
                }
            }
            _ => self.expr(e, acc),
        }
    }

    fn resolve_function(&self, callee: &Value) -> Option<String> {
        match node_type(callee) {
            "Identifier" => {
                if let Some(id) = referenced(callee) {
                    return self.cx.func_ids.get(&id).cloned();
                }
                self.unique_function(str_field(callee, "name")?)
            }
            "MemberAccess" => {
                let base = callee.get("expression")?;
                if node_type(base) != "Identifier" || !matches!(str_field(base, "name"), Some("this" | "super")) {
                    return None;
                }
                if let Some(fid) = referenced(callee).and_then(|id| self.cx.func_ids.get(&id)) {
                    return Some(fid.clone());
                }
                self.unique_function(str_field(callee, "memberName")?)
            }
            _ => None,
        }
    }

    fn unique_function(&self, name: &str) -> Option<String> {
        match self.cx.func_names.get(name).map(Vec::as_slice) {
            Some([only]) => Some(only.clone()),
            _ => None,
        }
    }

    fn is_event(&self, callee: &Value) -> bool {
        node_type(callee) == "Identifier"
            && (referenced(callee).is_some_and(|id| self.cx.event_ids.contains(&id))
                || (referenced(callee).is_none()
                    && str_field(callee, "name").is_some_and(|n| self.cx.event_names.contains(n))))
    }

    fn call(&mut self, e: &'a Value, acc: &mut Acc) {
        let args = list(e, "arguments");
        let Some(callee) = e.get("expression") else { return };
        let kind = str_field(e, "kind").unwrap_or("functionCall");
        if kind == "typeConversion"
            || kind == "structConstructorCall"
            || node_type(callee) == "ElementaryTypeNameExpression"
        {
            for a in args {
                self.expr(a, acc);
            }
            return;
        }

        if node_type(callee) == "MemberAccess" {
            let member = str_field(callee, "memberName").unwrap_or_default();
            let base = callee.get("expression");
            let base_type = base.and_then(type_string);
            let address_base = base_type.map(|t| t.starts_with("address"));
            let transfer = match member {
                "send" => address_base.unwrap_or(true),
                "transfer" => address_base.unwrap_or(args.len() == 1),
                "sendValue" => true,
                _ => false,
            };
            if transfer {
                acc.transfer = true;
                if let Some(base) = base.filter(|b| !self.is_magic_base(b)) {
                    self.expr(base, acc);
                }
                for a in args {
                    self.expr(a, acc);
                }
                return;
            }
            if matches!(member, "push" | "pop") && base_type.is_none_or(|t| t.contains('[') || t.starts_with("bytes")) {
                if let Some(base) = base {
                    self.lvalue(base, acc, true);
                }
                for a in args {
                    self.expr(a, acc);
                }
                return;
            }
        }

        // `x.call{value: v}(...)` and `x.call.value(v)(...)`.
        let low_level_base = match node_type(callee) {
            "FunctionCallOptions" => {
                let names: Vec<&str> = list(callee, "names").iter().filter_map(Value::as_str).collect();
                if names.contains(&"value") {
                    acc.transfer = true;
                }
                for o in list(callee, "options") {
                    self.expr(o, acc);
                }
                callee.get("expression")
            }
            "FunctionCall" => {
                let inner = callee.get("expression");
                if inner.and_then(|i| str_field(i, "memberName")) == Some("value") {
                    acc.transfer = true;
                }
                for a in list(callee, "arguments") {
                    self.expr(a, acc);
                }
                inner.and_then(|i| i.get("expression"))
            }
            _ => None,
        };
        if let Some(target) = low_level_base {
            let mut call_uses = Acc::default();
            if node_type(target) == "MemberAccess" {
                if let Some(b) = target.get("expression").filter(|b| !self.is_magic_base(b)) {
                    self.expr(b, &mut call_uses);
                }
            } else {
                self.expr(target, &mut call_uses);
            }
            for a in args {
                self.expr(a, &mut call_uses);
            }
            self.record_external(target, call_uses, acc);
            return;
        }

        if let Some(fid) = self.resolve_function(callee) {
            let mut arg_acc = Acc::default();
            for a in args {
                self.expr(a, &mut arg_acc);
            }
            let call = CallSite { callee: fid, resolved: true, args: arg_acc.uses.clone() };
            self.merge(acc, arg_acc);
            acc.calls.push(call);
            return;
        }

        if self.is_event(callee) {
            acc.event = true;
            for a in args {
                self.expr(a, acc);
            }
            return;
        }

        if node_type(callee) == "Identifier" && referenced(callee).is_none_or(is_builtin_declaration) {
            for a in args {
                self.expr(a, acc);
            }
            return;
        }

        let mut call_uses = Acc::default();
        match node_type(callee) {
            "MemberAccess" => {
                if let Some(b) = callee.get("expression").filter(|b| !self.is_magic_base(b)) {
                    self.expr(b, &mut call_uses);
                }
            }
            "Identifier" => {}
            _ => self.expr(callee, &mut call_uses),
        }
        for a in args {
            self.expr(a, &mut call_uses);
        }
        self.record_external(callee, call_uses, acc);
    }

    fn record_external(&self, callee: &Value, call_uses: Acc, acc: &mut Acc) {
        let label = self
            .mapper
            .text(callee)
            .map(|t| t.split_whitespace().collect::<Vec<_>>().join(" "))
            .or_else(|| str_field(callee, "memberName").map(str::to_string))
            .or_else(|| str_field(callee, "name").map(str::to_string))
            .unwrap_or_else(|| "<external>".to_string());
        let call = CallSite { callee: label, resolved: false, args: call_uses.uses.clone() };
        self.merge(acc, call_uses);
        acc.calls.push(call);
    }

    fn merge(&self, acc: &mut Acc, other: Acc) {
        acc.defs.extend(other.defs);
        acc.uses.extend(other.uses);
        acc.calls.extend(other.calls);
        acc.transfer |= other.transfer;
        acc.event |= other.event;
    }

    /// Conservative uses for nodes the lowering does not model: every
    /// identifier in the node's source text that names a variable in scope,
    /// plus `msg.sender` / `msg.value` (and their Yul forms).
    fn textual_uses(&self, node: &Value) -> BTreeSet<VarRef> {
        static IDENT: OnceLock<Regex> = OnceLock::new();
        static MSG: OnceLock<Regex> = OnceLock::new();
        let ident = IDENT.get_or_init(|| Regex::new(r"[A-Za-z_$][A-Za-z0-9_$]*").expect("static regex"));
        let msg = MSG.get_or_init(|| {
            Regex::new(r"\bmsg\s*\.\s*(sender|value)\b|\b(caller|callvalue)\s*\(").expect("static regex")
        });

        let mut uses = BTreeSet::new();
        for r in list(node, "externalReferences") {
            let ids: Vec<i64> = match r.get("declaration").and_then(Value::as_i64) {
                Some(id) => vec![id],
                None => r
                    .as_object()
                    .into_iter()
                    .flat_map(|m| m.values())
                    .filter_map(|v| v.get("declaration")?.as_i64())
                    .collect(),
            };
            for id in ids {
                if let Some(v) = self.vars.get(&id) {
                    uses.insert(v.clone());
                } else if let Some(name) = self.cx.state_ids.get(&id) {
                    uses.insert(VarRef::state(name.clone()));
                }
            }
        }
        let Some(text) = self.mapper.text(node) else { return uses };
        let mut inner = BTreeSet::new();
        collect_declared_names(node, &mut inner);
        for m in ident.find_iter(text) {
            let name = m.as_str();
            if inner.contains(name) {
                uses.insert(VarRef::local(name));
            } else if let Some(v) = self.by_name.get(name) {
                uses.insert(v.clone());
            } else if self.cx.state_names.contains(name) {
                uses.insert(VarRef::state(name));
            }
        }
        for c in msg.captures_iter(text) {
            let which = c.get(1).or_else(|| c.get(2)).map(|m| m.as_str());
            match which {
                Some("sender" | "caller") => uses.insert(VarRef { scope: Scope::Builtin, name: MSG_SENDER.into() }),
                Some(_) => uses.insert(VarRef { scope: Scope::Builtin, name: MSG_VALUE.into() }),
                None => false,
            };
        }
        uses
    }
}

/// Names of variables declared anywhere inside `node`.
fn collect_declared_names<'v>(node: &'v Value, out: &mut BTreeSet<&'v str>) {
    match node {
        Value::Object(map) => {
            if node_type(node) == "VariableDeclaration" {
                out.extend(str_field(node, "name").filter(|n| !n.is_empty()));
            }
            map.values().for_each(|v| collect_declared_names(v, out));
        }
        Value::Array(items) => items.iter().for_each(|v| collect_declared_names(v, out)),
        _ => {}
    }
}

impl std::fmt::Debug for ContractCtx<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContractCtx").field("name", &self.name).finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use super::*;

    fn fixture(name: &str) -> SourceUnit {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.ast.json"));
        SourceUnit::from_path(name, &path).expect("fixture loads")
    }

    fn lowered(name: &str) -> (SourceUnit, Vec<ContractModel>) {
        let unit = fixture(name);
        let models = lower(&unit).expect("fixture lowers");
        (unit, models)
    }

    fn set(vars: &[VarRef]) -> BTreeSet<VarRef> {
        vars.iter().cloned().collect()
    }

    #[test]
    fn unit_without_ast_is_rejected() {
        let unit = SourceUnit::from_source("x", "x.sol", "contract C {}");
        assert!(matches!(lower(&unit), Err(LowerError::MissingAst)));
    }

    #[test]
    fn doubler_assignment_from_msg_value() {
        let (unit, models) = lowered("doubler_ponzi");
        let enter = models[0].function("enter").unwrap();
        let stmt = enter
            .statements
            .iter()
            .find(|s| s.source_span.and_then(|sp| sp.text(&unit.source_text)) == Some("amount = msg.value"))
            .unwrap();
        assert_eq!(stmt.kind, StatementKind::Assign);
        assert_eq!(stmt.defs, set(&[VarRef::local("amount")]));
        assert_eq!(stmt.uses, set(&[VarRef::msg_value()]));
    }

    #[test]
    fn compound_assignment_reads_and_writes() {
        let (unit, models) = lowered("doubler_ponzi");
        let enter = models[0].function("enter").unwrap();
        let stmt = enter
            .statements
            .iter()
            .find(|s| s.source_span.and_then(|sp| sp.text(&unit.source_text)) == Some("balance -= transactionAmount"))
            .unwrap();
        assert_eq!(stmt.defs, set(&[VarRef::state("balance")]));
        assert_eq!(stmt.uses, set(&[VarRef::state("balance"), VarRef::local("transactionAmount")]));
        let loop_idx = stmt.parent.expect("inside the payout loop");
        assert_eq!(enter.statements[loop_idx].kind, StatementKind::Loop);
    }

    #[test]
    fn payout_send_is_a_value_transfer() {
        let (_, models) = lowered("doubler_ponzi");
        let enter = models[0].function("enter").unwrap();
        let transfers: Vec<_> = enter.statements.iter().filter(|s| s.kind == StatementKind::ValueTransfer).collect();
        assert_eq!(transfers.len(), 1);
        assert!(transfers[0].uses.contains(&VarRef::state("persons")));
    }

    #[test]
    fn empty_bodies_and_contracts() {
        let (_, models) = lowered("empty_contract");
        assert_eq!(models.len(), 1);
        assert!(models[0].functions.is_empty());
        let (_, models) = lowered("view_only");
        for f in &models[0].functions {
            assert!(f.referenced_vars().iter().all(|v| !v.is_builtin()));
        }
    }

    #[test]
    fn statements_lie_inside_their_function() {
        for name in [
            "doubler_ponzi",
            "erc20_token",
            "shared_balance",
            "call_flow",
            "ray_ponzi",
            "assembly_opaque",
            "large_contract",
        ] {
            let (unit, models) = lowered(name);
            for c in &models {
                for f in &c.functions {
                    let Some(fspan) = f.source_span else { continue };
                    assert!(fspan.text(&unit.source_text).is_some());
                    if !f.modifiers.is_empty() {
                        continue;
                    }
                    for s in &f.statements {
                        let span = s.source_span.unwrap();
                        assert!(fspan.contains(&span), "{name}: {}.{} statement outside", c.name, f.name);
                    }
                }
            }
        }
    }

    #[test]
    fn inherited_members_are_flattened() {
        let (_, models) = lowered("two_contracts");
        let vault = models.iter().find(|c| c.name == "Vault").unwrap();
        assert_eq!(vault.inherits, vec!["Ownable".to_string()]);
        assert!(vault.state_var("owner").is_some());
        assert!(vault.function("@ctor.Ownable").is_some());
        let sweep = vault.function("sweep").unwrap();
        assert_eq!(sweep.modifiers, vec!["onlyOwner".to_string()]);
        assert!(sweep.statements[0].uses.contains(&VarRef::msg_sender()), "modifier body inlined first");
    }

    #[test]
    fn internal_calls_resolve_and_external_ones_do_not() {
        let (_, models) = lowered("call_flow");
        let relay = models.iter().find(|c| c.name == "Relay").unwrap();
        let invest = relay.function("invest").unwrap();
        let calls: Vec<(&str, bool)> =
            invest.statements.iter().flat_map(|s| &s.calls).map(|c| (c.callee.as_str(), c.resolved)).collect();
        assert!(calls.contains(&("compute", true)));
        assert!(calls.contains(&("pay", true)));
        assert!(calls.iter().any(|(c, r)| c.contains("transfer") && !r));
    }

    #[test]
    fn assembly_is_opaque_with_textual_uses() {
        let (_, models) = lowered("assembly_opaque");
        let put = models[0].function("put").unwrap();
        let opaque = put.statements.iter().find(|s| s.kind == StatementKind::Opaque).unwrap();
        assert!(opaque.defs.is_empty());
        assert!(opaque.uses.contains(&VarRef::msg_value()));
        assert!(opaque.uses.contains(&VarRef::local("v")));
    }

    #[test]
    fn unknown_statement_kind_becomes_opaque() {
        let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/doubler_ponzi.ast.json");
        let text = std::fs::read_to_string(path).unwrap();
        let mut doc: Value = serde_json::from_str(&text).unwrap();
        fn inject(v: &mut Value) -> bool {
            if let Some(obj) = v.as_object_mut() {
                if obj.get("nodeType").and_then(Value::as_str) == Some("WhileStatement") {
                    obj.insert("nodeType".into(), Value::String("FutureLoopStatement".into()));
                    return true;
                }
                return obj.values_mut().any(inject);
            }
            v.as_array_mut().is_some_and(|a| a.iter_mut().any(inject))
        }
        assert!(inject(&mut doc));
        let unit = crate::ingest::load_ast(&doc.to_string()).unwrap();
        let models = lower(&unit).unwrap();
        let enter = models[0].function("enter").unwrap();
        let opaque = enter.statements.iter().find(|s| s.kind == StatementKind::Opaque).unwrap();
        assert!(opaque.uses.contains(&VarRef::state("persons")));
        assert!(opaque.uses.contains(&VarRef::local("transactionAmount")));
    }
}
