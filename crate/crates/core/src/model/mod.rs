//! Contract object model: contracts, functions and a statement-level IR
//! carrying def/use sets over variables.
//!
//! Modelling is field-insensitive (`persons[i].amount` is `persons`) and the
//! only taint-relevant builtins are `msg.sender` and `msg.value`.

mod lower;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use lower::{lower, LowerError};

/// Byte range inside a [`crate::SourceUnit`]'s `source_text`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub offset: usize,
    pub length: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.length
    }

    pub fn text<'a>(&self, source: &'a str) -> Option<&'a str> {
        source.get(self.offset..self.end())
    }

    pub fn contains(&self, other: &Span) -> bool {
        self.offset <= other.offset && other.end() <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    State,
    Local,
    Param,
    Builtin,
}

pub const MSG_SENDER: &str = "msg.sender";
pub const MSG_VALUE: &str = "msg.value";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarRef {
    pub scope: Scope,
    pub name: String,
}

impl VarRef {
    pub fn state(name: impl Into<String>) -> Self {
        VarRef { scope: Scope::State, name: name.into() }
    }
    pub fn local(name: impl Into<String>) -> Self {
        VarRef { scope: Scope::Local, name: name.into() }
    }
    pub fn param(name: impl Into<String>) -> Self {
        VarRef { scope: Scope::Param, name: name.into() }
    }
    pub fn msg_sender() -> Self {
        VarRef { scope: Scope::Builtin, name: MSG_SENDER.into() }
    }
    pub fn msg_value() -> Self {
        VarRef { scope: Scope::Builtin, name: MSG_VALUE.into() }
    }
    pub fn is_builtin(&self) -> bool {
        self.scope == Scope::Builtin
    }
}

impl fmt::Display for VarRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub type_name: String,
    pub span: Option<Span>,
    #[serde(default)]
    pub constant: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    External,
    Internal,
    Private,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    Function,
    Constructor,
    Fallback,
    Receive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementKind {
    Assign,
    Declare,
    Call,
    ValueTransfer,
    Branch,
    Loop,
    Return,
    Emit,
    Opaque,
}

/// A call made by a statement. Resolved callees name a function of the same
/// contract; anything else (external, library, dynamic) is unresolved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub callee: String,
    pub resolved: bool,
    pub args: BTreeSet<VarRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub kind: StatementKind,
    pub defs: BTreeSet<VarRef>,
    pub uses: BTreeSet<VarRef>,
    pub calls: Vec<CallSite>,
    pub source_span: Option<Span>,
    /// Index of the enclosing branch/loop statement, if any.
    pub parent: Option<usize>,
}

impl Statement {
    pub fn callees(&self) -> impl Iterator<Item = &str> {
        self.calls.iter().map(|c| c.callee.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionModel {
    /// Unique within the contract; `@ctor`, `@fallback` and `@receive` for
    /// the special functions, `name(types)` for overloads.
    pub name: String,
    pub kind: FunctionKind,
    pub visibility: Visibility,
    pub payable: bool,
    pub params: Vec<VariableDecl>,
    pub locals: Vec<VariableDecl>,
    pub statements: Vec<Statement>,
    /// `None` only for synthesised functions (a constructor holding state
    /// variable initialisers when the contract declares none).
    pub source_span: Option<Span>,
    /// Contract whose source text holds the definition.
    pub defined_in: String,
    pub modifiers: Vec<String>,
}

impl FunctionModel {
    pub fn is_constructor(&self) -> bool {
        self.kind == FunctionKind::Constructor
    }

    /// Every variable read or written anywhere in the body.
    pub fn referenced_vars(&self) -> BTreeSet<&VarRef> {
        self.statements.iter().flat_map(|s| s.defs.iter().chain(s.uses.iter())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSpan {
    pub name: String,
    pub span: Option<Span>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractKind {
    Contract,
    Library,
    Interface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractModel {
    pub name: String,
    pub kind: ContractKind,
    /// Own and inherited state variables, base-most first.
    pub state_vars: Vec<VariableDecl>,
    /// Own and inherited functions (overridden ones dropped), in source order.
    pub functions: Vec<FunctionModel>,
    pub inherits: Vec<String>,
    pub structs: Vec<NamedSpan>,
    pub events: Vec<NamedSpan>,
    pub modifiers: Vec<NamedSpan>,
    pub source_span: Option<Span>,
}

impl ContractModel {
    pub fn function(&self, name: &str) -> Option<&FunctionModel> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn state_var(&self, name: &str) -> Option<&VariableDecl> {
        self.state_vars.iter().find(|v| v.name == name)
    }
}

/// Statement indices at which a variable is defined and used.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DefUse {
    pub defs: Vec<usize>,
    pub uses: Vec<usize>,
}

/// Def and use sites per variable; indices ascending.
pub fn def_use_table(f: &FunctionModel) -> BTreeMap<VarRef, DefUse> {
    let mut table: BTreeMap<VarRef, DefUse> = BTreeMap::new();
    for (i, stmt) in f.statements.iter().enumerate() {
        for v in &stmt.defs {
            table.entry(v.clone()).or_default().defs.push(i);
        }
        for v in &stmt.uses {
            table.entry(v.clone()).or_default().uses.push(i);
        }
    }
    table
}
