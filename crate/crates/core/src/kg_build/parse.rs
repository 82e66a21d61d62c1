//! SPO line format check.
//!
//! Accepted shape: an optional list index (`3.` or `3)`), then
//! `(subject, predicate, object)` with nothing after the closing paren.
//! Commas separate fields only at parenthesis depth zero; `\,` is a literal
//! comma and `\\` a literal backslash. Each field is trimmed and must be
//! nonempty.

use std::sync::OnceLock;

use regex::Regex;

fn line_shape() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.)]\s*)?\((.*)\)\s*$").expect("valid regex"))
}

fn split_fields(inner: &str) -> Option<Vec<String>> {
    let mut fields = Vec::new();
    let mut current = String::new();
    let mut depth = 0usize;
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some(next @ (',' | '\\' | '(' | ')')) => current.push(next),
                Some(other) => {
                    current.push('\\');
                    current.push(other);
                }
                None => current.push('\\'),
            },
            '(' => {
                depth += 1;
                current.push(c);
            }
            ')' => {
                depth = depth.checked_sub(1)?;
                current.push(c);
            }
            ',' if depth == 0 => fields.push(std::mem::take(&mut current)),
            _ => current.push(c),
        }
    }
    if depth != 0 {
        return None;
    }
    fields.push(current);
    Some(fields)
}

/// Parses one model output line into trimmed `(subject, predicate, object)`.
pub fn parse_spo(line: &str) -> Option<(String, String, String)> {
    let inner = line_shape().captures(line)?.get(1)?.as_str();
    let fields = split_fields(inner)?;
    let [s, p, o]: [String; 3] = fields.try_into().ok()?;
    let (s, p, o) = (s.trim().to_string(), p.trim().to_string(), o.trim().to_string());
    if s.is_empty() || p.is_empty() || o.is_empty() {
        return None;
    }
    Some((s, p, o))
}
