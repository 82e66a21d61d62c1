//! Deterministic rule-table provider.
//!
//! A rule fires when its optional `role` matches the call and every string
//! in `when` occurs in the prompt. The first firing rule that carries the
//! requested kind of answer (a completion, scores, or a failure) wins.
//! A prompt containing `[ECHO]` completes to the rest of that line.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GatewayError, GenerationParams, LlmProvider, OptionScore, PromptRole};

const ECHO: &str = "[ECHO]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Unavailable,
    Truncated,
    RateLimited,
}

impl MockFailure {
    fn to_error(self) -> GatewayError {
        match self {
            MockFailure::Unavailable => GatewayError::ProviderUnavailable("mock failure".into()),
            MockFailure::Truncated => GatewayError::ResponseTruncated,
            MockFailure::RateLimited => GatewayError::RateLimited,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<PromptRole>,
    #[serde(default)]
    pub when: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<MockFailure>,
}

impl MockRule {
    fn fires(&self, prompt: &str, params: &GenerationParams) -> bool {
        if let Some(role) = self.role {
            if params.role != Some(role) {
                return false;
            }
        }
        self.when.iter().all(|w| prompt.contains(w.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRules {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default_completion: String,
    #[serde(default)]
    pub default_scores: Option<BTreeMap<String, f64>>,
}

impl MockRules {
    pub fn from_json(json: &str) -> Result<Self, GatewayError> {
        serde_json::from_str(json).map_err(|e| GatewayError::Template(format!("mock rules: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| GatewayError::Template(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    rules: MockRules,
}

impl MockProvider {
    pub fn new(rules: MockRules) -> Self {
        Self { rules }
    }
}

impl LlmProvider for MockProvider {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        if let Some(pos) = prompt.find(ECHO) {
            let rest = &prompt[pos + ECHO.len()..];
            return Ok(rest.lines().next().unwrap_or("").to_string());
        }
        for rule in self.rules.rules.iter().filter(|r| r.fires(prompt, params)) {
            if let Some(f) = rule.fail {
                return Err(f.to_error());
            }
            if let Some(c) = &rule.completion {
                return Ok(c.clone());
            }
        }
        Ok(self.rules.default_completion.clone())
    }

    fn score_options(&self, prompt: &str, options: &[&str], params: &GenerationParams) -> Result<Vec<OptionScore>, GatewayError> {
        let mut table = self.rules.default_scores.as_ref();
        for rule in self.rules.rules.iter().filter(|r| r.fires(prompt, params)) {
            if let Some(f) = rule.fail {
                return Err(f.to_error());
            }
            if rule.scores.is_some() {
                table = rule.scores.as_ref();
                break;
            }
        }
        let table = table.ok_or_else(|| GatewayError::OptionNotScorable("no mock scores for prompt".into()))?;
        options
            .iter()
            .map(|o| {
                table
                    .get(*o)
                    .map(|lp| OptionScore::new(*o, *lp))
                    .ok_or_else(|| GatewayError::OptionNotScorable(format!("mock table has no score for {o:?}")))
            })
            .collect()
    }
}
