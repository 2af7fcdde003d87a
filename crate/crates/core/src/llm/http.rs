use std::fmt;
use std::time::Duration;

use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::backend::{
    Capabilities, ChatCompletionRequest, ChatCompletionResponse, CompletionRequest, CompletionResponse, LlmBackend,
};
use super::LlmError;

/// Environment variable holding the bearer token.
pub const DEFAULT_API_KEY_VAR: &str = "KT_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `attempt` (1-based).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32 - 1);
        Duration::from_millis(ms as u64)
    }

    /// Runs `f` until it succeeds, fails permanently or runs out of attempts.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    let wait = self.backoff(attempt);
                    warn!("request failed ({e}); retry {attempt} in {wait:?}");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Client for an OpenAI-compatible server (`/completions`,
/// `/chat/completions` under `base_url`).
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    capabilities: Capabilities,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base_url", &self.base_url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("capabilities", &self.capabilities)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            capabilities: Capabilities {
                completion_logprobs: true,
                chat: true,
            },
            agent,
        }
    }

    /// Reads the key from `key_var`; a missing variable means no auth header.
    pub fn from_env(base_url: &str, key_var: &str, timeout: Duration) -> Self {
        Self::new(base_url, std::env::var(key_var).ok(), timeout)
    }

    pub fn with_capabilities(mut self, c: Capabilities) -> Self {
        self.capabilities = c;
        self
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, LlmError> {
        let url = format!("{}{path}", self.base_url);
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::StatusCode(status) => LlmError::Http { status },
            other => LlmError::Transport(other.to_string()),
        })?;
        resp.body_mut()
            .read_json::<R>()
            .map_err(|e| LlmError::BadResponse(e.to_string()))
    }
}

impl LlmBackend for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.post("/completions", req)
    }

    fn chat(&self, req: &ChatCompletionRequest) -> Result<ChatCompletionResponse, LlmError> {
        self.post("/chat/completions", req)
    }
}
