//! OpenAI-style chat-completion client.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{GatewayError, GenerationParams, LlmProvider, OptionScore};
use crate::transport::{HttpRequest, Transport, TransportError};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(500), max_delay: Duration::from_secs(20) }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self { max_retries, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    fn delay(&self, attempt: u32, jitter: f64) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << attempt.min(16));
        exp.min(self.max_delay) + self.base_delay.mul_f64(jitter)
    }
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct HttpProvider {
    transport: Arc<dyn Transport>,
    url: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
    top_logprobs: u32,
    jitter: Mutex<ChaCha8Rng>,
    sleep: Sleeper,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

fn option_token(raw: &str) -> &str {
    raw.trim().trim_start_matches('(').trim_end_matches([')', '.', ':']).trim()
}

impl HttpProvider {
    pub fn new(transport: Arc<dyn Transport>, url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            transport,
            url: url.into(),
            api_key,
            model: model.into(),
            retry: RetryPolicy::default(),
            top_logprobs: 20,
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
            sleep: Box::new(std::thread::sleep),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Seeds the backoff jitter.
    pub fn with_seed(self, seed: u64) -> Self {
        *self.jitter.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn with_top_logprobs(mut self, n: u32) -> Self {
        self.top_logprobs = n;
        self
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn chat_request(&self, prompt: &str, params: &GenerationParams, logprobs: bool) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": if logprobs { 1 } else { params.max_tokens },
            "logprobs": logprobs,
        });
        if logprobs {
            body["top_logprobs"] = json!(self.top_logprobs);
        }
        body
    }

    fn send(&self, body: Value) -> Result<ChatResponse, GatewayError> {
        let mut headers = Vec::new();
        if let Some(key) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let request = HttpRequest { url: self.url.clone(), headers, body };
        let mut last = GatewayError::ProviderUnavailable("no attempt made".into());
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                let jitter = self.jitter.lock().unwrap().random::<f64>();
                (self.sleep)(self.retry.delay(attempt - 1, jitter));
            }
            match self.transport.post_json(&request) {
                Ok(resp) if resp.status == 200 => {
                    return serde_json::from_str(&resp.body).map_err(|e| GatewayError::MalformedResponse(e.to_string()));
                }
                Ok(resp) if resp.status == 429 => last = GatewayError::RateLimited,
                Ok(resp) if resp.status >= 500 => {
                    last = GatewayError::ProviderUnavailable(format!("HTTP {}", resp.status));
                }
                Ok(resp) => {
                    return Err(GatewayError::ProviderUnavailable(format!("HTTP {}: {}", resp.status, resp.body)));
                }
                Err(TransportError::Connection(e)) => last = GatewayError::ProviderUnavailable(e),
                Err(e) => return Err(GatewayError::ProviderUnavailable(e.to_string())),
            }
            log::warn!("chat request attempt {} failed: {last}", attempt + 1);
        }
        Err(last)
    }
}

impl LlmProvider for HttpProvider {
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, GatewayError> {
        let response = self.send(self.chat_request(prompt, params, false))?;
        let choice = response.choices.into_iter().next().ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
        if choice.finish_reason.as_deref() == Some("length") {
            return Err(GatewayError::ResponseTruncated);
        }
        Ok(choice.message.content.unwrap_or_default())
    }

    /// Reads the first generated token's top log-probabilities. Options outside
    /// the returned top list score `-inf`. When the response carries no
    /// log-probabilities at all, the generated token itself is taken as the
    /// choice: it scores 0 and every other option `-inf`.
    fn score_options(&self, prompt: &str, options: &[&str], params: &GenerationParams) -> Result<Vec<OptionScore>, GatewayError> {
        let response = self.send(self.chat_request(prompt, params, true))?;
        let choice = response.choices.into_iter().next().ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
        let first = choice.logprobs.and_then(|l| l.content).and_then(|c| c.into_iter().next());
        match first {
            Some(tok) => {
                let mut candidates: Vec<(String, f64)> =
                    tok.top_logprobs.into_iter().map(|t| (t.token, t.logprob)).collect();
                candidates.push((tok.token, tok.logprob));
                let scores: Vec<OptionScore> = options
                    .iter()
                    .map(|o| {
                        let best = candidates
                            .iter()
                            .filter(|(t, _)| option_token(t) == *o)
                            .map(|(_, lp)| *lp)
                            .fold(f64::NEG_INFINITY, f64::max);
                        OptionScore::new(*o, best)
                    })
                    .collect();
                if scores.iter().all(|s| s.logprob == f64::NEG_INFINITY) {
                    return Err(GatewayError::OptionNotScorable("no option among top log-probabilities".into()));
                }
                Ok(scores)
            }
            None => {
                let content = choice.message.content.unwrap_or_default();
                let chosen = option_token(&content);
                if !options.contains(&chosen) {
                    return Err(GatewayError::OptionNotScorable(format!("generated {content:?}")));
                }
                log::warn!("provider returned no log-probabilities; using generated option {chosen:?}");
                Ok(options
                    .iter()
                    .map(|o| OptionScore::new(*o, if *o == chosen { 0.0 } else { f64::NEG_INFINITY }))
                    .collect())
            }
        }
    }
}
