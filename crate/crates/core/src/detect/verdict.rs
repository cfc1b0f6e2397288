use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("reply contains neither `true` nor `false`")]
pub struct UnparseableVerdict;

/// The last standalone `true` / `false` token in `text`, case-insensitive.
pub fn parse_verdict(text: &str) -> Result<bool, UnparseableVerdict> {
    static TOKEN: OnceLock<Regex> = OnceLock::new();
    let token = TOKEN.get_or_init(|| Regex::new(r"(?i)\b(true|false)\b").expect("static regex"));
    token.find_iter(text).last().map(|m| m.as_str().eq_ignore_ascii_case("true")).ok_or(UnparseableVerdict)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_token_wins() {
        assert_eq!(parse_verdict("true"), Ok(true));
        assert_eq!(parse_verdict("The contract is not a Ponzi. false"), Ok(false));
        assert_eq!(parse_verdict("True at first, but FALSE."), Ok(false));
        assert_eq!(parse_verdict("maybe"), Err(UnparseableVerdict));
        assert_eq!(parse_verdict("untrue falsehood"), Err(UnparseableVerdict));
    }
}
