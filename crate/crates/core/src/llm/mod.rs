//! Posing next-step prediction to a language model: prompt templates, the
//! fine-tuning corpus, zero-shot chat requests, response scoring and
//! interchangeable HTTP, mock and replay backends.

mod backend;
mod client;
mod http;
mod prompt;
mod replay;
mod response;

use thiserror::Error;

pub use backend::{
    mock_backend, Capabilities, ChatChoice, ChatCompletionRequest, ChatCompletionResponse, ChatMessage,
    ChatResponseMessage, CompletionChoice, CompletionLogprobs, CompletionRequest, CompletionResponse, LlmBackend,
    MockBackend, TemplateFilter,
};
pub use client::{predict_llm, predict_many, ClientSettings, LlmClient, LlmMode, SURROGATE_CONFIDENCE};
pub use http::{HttpBackend, RetryPolicy, DEFAULT_API_KEY_VAR};
pub use prompt::{
    build_zero_shot_request, export_finetune_corpus, parse_prompt, read_corpus, render_extended_prompt,
    render_minimal_prompt, render_prompt, space_digits, unspace_digits, ChatRequest, ParsedPrompt, PromptExample,
    PromptOptions, PromptTemplate, RESPONSE_STUB, SYSTEM_MESSAGE,
};
pub use replay::{request_hash, RecordingBackend, ReplayBackend, ReplayRecord};
pub use response::{normalize_logprobs, parse_completion, TokenLogprobs};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("could not parse completion {raw:?}")]
    ParseFailure { raw: String },
    #[error("no CORRECT or WRONG tokens among the logprobs")]
    NoSignal,
    #[error("invalid logprob {value} for token {token:?}")]
    InvalidLogprob { token: String, value: f64 },
    #[error("malformed prompt: {0}")]
    MalformedPrompt(String),
    #[error("backend does not support {0} requests")]
    Unsupported(&'static str),
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {status}")]
    Http { status: u16 },
    #[error("unreadable response: {0}")]
    BadResponse(String),
    #[error("replay: {0}")]
    Replay(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl PartialEq for LlmError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

impl LlmError {
    /// Transport errors, rate limits and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Http { status } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Errors that describe one data point rather than the backend.
    pub fn is_point_failure(&self) -> bool {
        matches!(
            self,
            LlmError::ParseFailure { .. } | LlmError::NoSignal | LlmError::InvalidLogprob { .. }
        )
    }
}
