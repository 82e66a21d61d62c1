//! Chat-completion access for the five prompt roles.
//!
//! [`LlmGateway`] owns the templates, default generation parameters and an
//! in-flight request cap; providers implement [`LlmProvider`]. Two providers
//! ship: [`MockProvider`], a rule table for offline runs, and
//! [`HttpProvider`], an OpenAI-style chat-completion client.

mod http;
mod mock;
mod template;

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpProvider, RetryPolicy};
pub use mock::{MockFailure, MockProvider, MockRule, MockRules};
pub use template::{Exemplar, PromptRole, PromptTemplate, TemplateSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("missing template binding {{{0}}}")]
    MissingBinding(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("response truncated")]
    ResponseTruncated,
    #[error("rate limited after retries")]
    RateLimited,
    #[error("option not scorable: {0}")]
    OptionNotScorable(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    /// Which prompt role issued the call. Providers may use it for routing;
    /// it is never sent over the wire.
    #[serde(skip)]
    pub role: Option<PromptRole>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 512, role: None }
    }
}

impl GenerationParams {
    pub fn for_role(&self, role: PromptRole) -> Self {
        Self { role: Some(role), ..self.clone() }
    }
}

/// Log-probability of one answer option as the next token.
///
/// `logprob` is `-inf` for options the provider ranked out of reach; it is
/// written as `null` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionScore {
    pub option: String,
    #[serde(with = "logprob_serde")]
    pub logprob: f64,
}

impl OptionScore {
    pub fn new(option: impl Into<String>, logprob: f64) -> Self {
        Self { option: option.into(), logprob }
    }
}

mod logprob_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

pub trait LlmProvider: Send + Sync {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError>;

    /// One score per option, in the order given.
    fn score_options(&self, prompt: &str, options: &[&str], params: &GenerationParams) -> Result<Vec<OptionScore>, GatewayError>;
}

struct Limiter {
    cap: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct LlmGateway {
    provider: Arc<dyn LlmProvider>,
    templates: TemplateSet,
    params: GenerationParams,
    limiter: Limiter,
}

impl LlmGateway {
    pub fn new(provider: Arc<dyn LlmProvider>, templates: TemplateSet) -> Self {
        Self { provider, templates, params: GenerationParams::default(), limiter: Limiter::new(8) }
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.limiter = Limiter::new(cap);
        self
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn params(&self) -> &GenerationParams {
        &self.params
    }

    pub fn render(&self, role: PromptRole, bindings: &BTreeMap<&str, &str>) -> Result<String, GatewayError> {
        self.templates.get(role).render(bindings)
    }

    pub fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        let _permit = self.limiter.acquire();
        self.provider.complete(prompt, params)
    }

    /// Renders the template for `role` and completes it with the default parameters.
    pub fn complete_role(&self, role: PromptRole, bindings: &BTreeMap<&str, &str>) -> Result<String, GatewayError> {
        let prompt = self.render(role, bindings)?;
        self.complete(&prompt, &self.params.for_role(role))
    }

    pub fn score_options(&self, prompt: &str, options: &[&str]) -> Result<Vec<OptionScore>, GatewayError> {
        if options.is_empty() {
            return Err(GatewayError::OptionNotScorable("no options given".into()));
        }
        let mut seen = HashSet::new();
        for o in options {
            if !seen.insert(*o) {
                return Err(GatewayError::OptionNotScorable(format!("duplicate option {o:?}")));
            }
        }
        let params = self.params.for_role(PromptRole::Classify);
        let scores = {
            let _permit = self.limiter.acquire();
            self.provider.score_options(prompt, options, &params)?
        };
        let aligned = scores.len() == options.len() && scores.iter().zip(options).all(|(s, o)| s.option == *o);
        if !aligned {
            return Err(GatewayError::MalformedResponse("provider returned misaligned option scores".into()));
        }
        if scores.iter().any(|s| s.logprob.is_nan() || s.logprob == f64::INFINITY) {
            return Err(GatewayError::MalformedResponse("non-finite option score".into()));
        }
        Ok(scores)
    }
}
