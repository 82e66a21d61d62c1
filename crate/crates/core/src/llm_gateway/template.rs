//! Few-shot prompt templates.
//!
//! Templates are TOML documents:
//!
//! ```toml
//! role = "rationale"
//! system = "..."
//! user = "Text: {text}"
//!
//! [[exemplars]]
//! input = "..."
//! output = "..."
//!
//! [sections]          # optional named snippets used by callers
//! knowledge_header = "..."
//! ```
//!
//! Placeholders are `{name}` with `name` in `[a-z_]+`; `{{` and `}}` are
//! literal braces. Bound values are inserted verbatim and never rescanned.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Rationale,
    TripletExtract,
    SelfCheck,
    Ner,
    Classify,
}

impl PromptRole {
    pub const ALL: [PromptRole; 5] =
        [PromptRole::Rationale, PromptRole::TripletExtract, PromptRole::SelfCheck, PromptRole::Ner, PromptRole::Classify];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptRole::Rationale => "rationale.toml",
            PromptRole::TripletExtract => "triplet_extract.toml",
            PromptRole::SelfCheck => "self_check.toml",
            PromptRole::Ner => "ner.toml",
            PromptRole::Classify => "classify.toml",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptRole::Rationale => include_str!("../../templates/rationale.toml"),
            PromptRole::TripletExtract => include_str!("../../templates/triplet_extract.toml"),
            PromptRole::SelfCheck => include_str!("../../templates/self_check.toml"),
            PromptRole::Ner => include_str!("../../templates/ner.toml"),
            PromptRole::Classify => include_str!("../../templates/classify.toml"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub role: PromptRole,
    #[serde(rename = "system")]
    pub system_text: String,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
    #[serde(rename = "user")]
    pub user_slot: String,
    #[serde(default)]
    pub sections: BTreeMap<String, String>,
}

enum Piece<'a> {
    Literal(&'a str),
    Brace(char),
    Placeholder(&'a str),
}

fn tokenize(pattern: &str) -> Result<Vec<Piece<'_>>, GatewayError> {
    let bytes = pattern.as_bytes();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' | b'}' if bytes.get(i + 1) == Some(&bytes[i]) => {
                pieces.push(Piece::Literal(&pattern[start..i]));
                pieces.push(Piece::Brace(bytes[i] as char));
                i += 2;
                start = i;
            }
            b'{' => {
                let close = pattern[i + 1..]
                    .find('}')
                    .map(|off| i + 1 + off)
                    .ok_or_else(|| GatewayError::Template(format!("unclosed placeholder at byte {i}")))?;
                let name = &pattern[i + 1..close];
                if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
                    return Err(GatewayError::Template(format!("invalid placeholder {{{name}}}")));
                }
                pieces.push(Piece::Literal(&pattern[start..i]));
                pieces.push(Piece::Placeholder(name));
                i = close + 1;
                start = i;
            }
            b'}' => return Err(GatewayError::Template(format!("stray '}}' at byte {i}"))),
            _ => i += 1,
        }
    }
    pieces.push(Piece::Literal(&pattern[start..]));
    Ok(pieces)
}

impl PromptTemplate {
    pub fn from_toml(text: &str) -> Result<Self, GatewayError> {
        let template: PromptTemplate = toml::from_str(text).map_err(|e| GatewayError::Template(e.to_string()))?;
        template.validate()?;
        Ok(template)
    }

    /// Parses the user slot and, for the classify role, checks the answer options.
    pub fn validate(&self) -> Result<(), GatewayError> {
        tokenize(&self.user_slot)?;
        if self.role == PromptRole::Classify {
            for option in ["(a)", "(b)"] {
                let n = self.user_slot.lines().filter(|l| l.trim_start().starts_with(option)).count();
                if n != 1 {
                    return Err(GatewayError::Template(format!(
                        "classify template must list option {option} exactly once, found {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Placeholder names referenced by the user slot, in order of first use.
    pub fn placeholders(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for piece in tokenize(&self.user_slot).unwrap_or_default() {
            if let Piece::Placeholder(n) = piece {
                if !names.iter().any(|x| x == n) {
                    names.push(n.to_string());
                }
            }
        }
        names
    }

    pub fn section(&self, name: &str) -> &str {
        self.sections.get(name).map(String::as_str).unwrap_or("")
    }

    /// System text, then each exemplar, then the bound user slot, separated by blank lines.
    pub fn render(&self, bindings: &BTreeMap<&str, &str>) -> Result<String, GatewayError> {
        let mut out = String::new();
        out.push_str(self.system_text.trim_end());
        for ex in &self.exemplars {
            out.push_str("\n\n");
            out.push_str(ex.input.trim_end());
            out.push('\n');
            out.push_str(ex.output.trim_end());
        }
        out.push_str("\n\n");
        for piece in tokenize(&self.user_slot)? {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Brace(c) => out.push(c),
                Piece::Placeholder(name) => {
                    let value = bindings.get(name).ok_or_else(|| GatewayError::MissingBinding(name.to_string()))?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// The five templates used by the pipeline.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<PromptRole, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = PromptRole::ALL
            .iter()
            .map(|role| {
                let t = PromptTemplate::from_toml(role.builtin()).expect("built-in template is valid");
                (*role, t)
            })
            .collect();
        Self { templates }
    }

    /// Loads templates from `dir`, falling back to the built-in one for any missing file.
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let mut set = Self::builtin();
        for role in PromptRole::ALL {
            let path = dir.join(role.file_name());
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| GatewayError::Template(format!("{}: {e}", path.display())))?;
                let t = PromptTemplate::from_toml(&text)?;
                if t.role != role {
                    return Err(GatewayError::Template(format!("{} declares role {:?}", path.display(), t.role)));
                }
                set.templates.insert(role, t);
            }
        }
        Ok(set)
    }

    pub fn get(&self, role: PromptRole) -> &PromptTemplate {
        &self.templates[&role]
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
