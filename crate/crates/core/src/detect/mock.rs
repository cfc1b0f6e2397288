//! Rule-based stand-in for a chat model, used by tests and offline runs.
//!
//! Analysis-stage prompts (those carrying a ```solidity block) are scanned
//! for a loop over a stored collection that sends value to a recipient taken
//! from that collection. Detection-stage prompts answer `true` exactly when
//! the embedded analysis reports that pattern. The output is a pure function
//! of the prompt text.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;

use super::backend::{AttemptError, ChatBackend, Completion};
use super::prompt::estimate_tokens;
use super::LlmConfig;

pub const PATTERN_FOUND: &str = "PAYOUT_PATTERN: participant-collection payout loop detected";
pub const PATTERN_ABSENT: &str = "PAYOUT_PATTERN: none";

#[derive(Debug, Clone, Copy, Default)]
pub struct MockBackend;

impl ChatBackend for MockBackend {
    fn attempt(&self, prompt: &str, _cfg: &LlmConfig) -> Result<Completion, AttemptError> {
        let text = respond(prompt);
        Ok(Completion { input_tokens: estimate_tokens(prompt), output_tokens: estimate_tokens(&text), text })
    }
}

/// The mock's reply to `prompt`.
pub fn respond(prompt: &str) -> String {
    let blocks = solidity_blocks(prompt);
    if blocks.is_empty() {
        return detection_reply(prompt);
    }
    analysis_reply(&blocks.join("\n"))
}

fn detection_reply(prompt: &str) -> String {
    if prompt.contains(PATTERN_FOUND) {
        "The analysis shows payouts to earlier participants funded from a shared pool of new deposits, which matches the definition.\ntrue".into()
    } else {
        "The analysis shows no payouts to earlier participants funded by later deposits.\nfalse".into()
    }
}

fn analysis_reply(code: &str) -> String {
    let functions = function_names(code);
    let transfers = transfer_sites(code).len();
    let finding = payout_loop(code);
    let mut out = String::from("Function breakdown:\n");
    if functions.is_empty() {
        out.push_str("- (no named functions)\n");
    }
    for f in &functions {
        out.push_str(&format!("- {f}\n"));
    }
    out.push_str(&format!("Fund flow: {transfers} value transfer site(s).\n"));
    match finding {
        Some(collection) => {
            out.push_str(&format!("{PATTERN_FOUND} (collection `{collection}`).\n"));
            out.push_str("Summary: funds sent inside the loop go to participants recorded in storage.\n");
        }
        None => {
            out.push_str(&format!("{PATTERN_ABSENT}.\n"));
            out.push_str("Summary: no loop pays out participants taken from a stored collection.\n");
        }
    }
    out
}

fn solidity_blocks(prompt: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = prompt;
    while let Some(start) = rest.find("```solidity") {
        let body = &rest[start + "```solidity".len()..];
        let end = body.find("```").unwrap_or(body.len());
        out.push(&body[..end]);
        rest = &body[end..];
        if rest.starts_with("```") {
            rest = &rest[3..];
        }
    }
    out
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

fn function_names(code: &str) -> Vec<String> {
    static FN: OnceLock<Regex> = OnceLock::new();
    let mut seen = BTreeSet::new();
    re(&FN, r"\bfunction\s+([A-Za-z_]\w*)")
        .captures_iter(code)
        .map(|c| c[1].to_string())
        .filter(|n| seen.insert(n.clone()))
        .collect()
}

/// Names of state arrays and mappings declared in `code`.
fn collections(code: &str) -> BTreeSet<String> {
    static DECL: OnceLock<Regex> = OnceLock::new();
    let decl = re(
        &DECL,
        r"(?m)^\s*(?:mapping\s*\(.*\)|[A-Za-z_][\w.]*(?:\s*\[\s*\w*\s*\])+)\s+(?:(?:public|private|internal|constant|immutable)\s+)*([A-Za-z_]\w*)\s*[;=]",
    );
    decl.captures_iter(code).map(|c| c[1].to_string()).collect()
}

/// Byte range of the block opened by the first `{` at or after `from`.
fn braced_block(code: &str, from: usize) -> Option<(usize, usize)> {
    let open = from + code[from..].find('{')?;
    let mut depth = 0usize;
    for (i, ch) in code[open..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((open, open + i + 1));
                }
            }
            _ => {}
        }
    }
    None
}

/// `(recipient expression, byte offset)` for each value transfer in `code`.
fn transfer_sites(code: &str) -> Vec<(String, usize)> {
    static MEMBER: OnceLock<Regex> = OnceLock::new();
    static VALUE_FN: OnceLock<Regex> = OnceLock::new();
    let member = re(&MEMBER, r"\.(?:send|transfer)\s*\(|\.call\s*(?:\.value\s*\(|\{\s*value\s*:)");
    let value_fn = re(&VALUE_FN, r"\bsendValue\s*\(\s*([^,()]+(?:\([^()]*\))?)");
    let mut out = Vec::new();
    for m in member.find_iter(code) {
        let head = &code[..m.start()];
        let start = head.rfind([';', '{', '}', '\n']).map_or(0, |i| i + 1);
        out.push((head[start..].trim().to_string(), m.start()));
    }
    for c in value_fn.captures_iter(code) {
        let whole = c.get(0).expect("match");
        out.push((c[1].trim().to_string(), whole.start()));
    }
    out
}

fn names_collection(expr: &str, collection: &str) -> bool {
    let pattern = format!(r"\b{}\s*\[", regex::escape(collection));
    Regex::new(&pattern).is_ok_and(|r| r.is_match(expr))
}

/// Collection whose elements receive value inside a loop over it.
fn payout_loop(code: &str) -> Option<String> {
    static LOOP: OnceLock<Regex> = OnceLock::new();
    static IDENT: OnceLock<Regex> = OnceLock::new();
    let loops = re(&LOOP, r"\b(?:while|for)\s*\(");
    let ident = re(&IDENT, r"^[A-Za-z_]\w*$");
    let stored = collections(code);
    for m in loops.find_iter(code) {
        let Some((open, end)) = braced_block(code, m.start()) else { continue };
        let (body, region) = (&code[open..end], &code[m.start()..end]);
        for collection in &stored {
            let referenced = names_collection(region, collection) || region.contains(&format!("{collection}.length"));
            if !referenced {
                continue;
            }
            for (recipient, _) in transfer_sites(body) {
                let recipient = recipient.trim_start_matches("payable(").trim_end_matches(')').trim();
                if names_collection(recipient, collection) {
                    return Some(collection.clone());
                }
                // A local holding an element of the collection.
                if ident.is_match(recipient) {
                    let assigned =
                        format!(r"\b{}\s*=[^;=][^;]*\b{}\s*\[", regex::escape(recipient), regex::escape(collection));
                    if Regex::new(&assigned).is_ok_and(|r| r.is_match(body)) {
                        return Some(collection.clone());
                    }
                }
            }
        }
    }
    None
}
