use log::debug;
use serde::{Deserialize, Serialize};

use super::backend::{ChatCompletionRequest, ChatMessage, CompletionRequest, LlmBackend};
use super::http::RetryPolicy;
use super::prompt::{build_zero_shot_request, render_prompt, PromptOptions, PromptTemplate};
use super::response::{normalize_logprobs, parse_completion};
use super::LlmError;
use crate::features::HistoryFeatures;
use crate::prediction::{Label, Prediction};

/// Probability assigned to a parsed word when no logprobs are available.
pub const SURROGATE_CONFIDENCE: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmMode {
    /// Fine-tuned completion model scored through first-token logprobs.
    Finetuned(PromptTemplate),
    /// Chat model answering the minimal prompt under the instructor message.
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSettings {
    pub model: String,
    pub max_tokens: u32,
    pub top_logprobs: u32,
    pub temperature: f64,
    pub surrogate_confidence: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub prompt: PromptOptions,
}

impl Default for ClientSettings {
    fn default() -> Self {
        ClientSettings {
            model: "knowledge-tracing".into(),
            max_tokens: 1,
            top_logprobs: 5,
            temperature: 0.0,
            surrogate_confidence: SURROGATE_CONFIDENCE,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            prompt: PromptOptions::default(),
        }
    }
}

pub struct LlmClient<'a> {
    pub backend: &'a dyn LlmBackend,
    pub settings: ClientSettings,
}

impl<'a> LlmClient<'a> {
    pub fn new(backend: &'a dyn LlmBackend, settings: ClientSettings) -> Self {
        LlmClient { backend, settings }
    }

    fn surrogate(&self, label: Label) -> f64 {
        match label {
            Label::Correct => self.settings.surrogate_confidence,
            Label::Wrong => 1.0 - self.settings.surrogate_confidence,
        }
    }

    fn finetuned(&self, template: PromptTemplate, f: &HistoryFeatures) -> Result<Prediction, LlmError> {
        if !self.backend.capabilities().completion_logprobs {
            return Err(LlmError::Unsupported("completion"));
        }
        let s = &self.settings;
        let req = CompletionRequest {
            model: s.model.clone(),
            prompt: render_prompt(template, f, s.prompt),
            max_tokens: s.max_tokens,
            logprobs: s.top_logprobs,
            temperature: s.temperature,
        };
        let resp = s.retry.run(|| self.backend.complete(&req))?;
        let p = match resp.first_token_logprobs() {
            Some(lp) => normalize_logprobs(&lp)?,
            None => self.surrogate(parse_completion(resp.text().unwrap_or_default())?),
        };
        Ok(Prediction::from_probability(p))
    }

    fn zero_shot(&self, f: &HistoryFeatures) -> Result<Prediction, LlmError> {
        if !self.backend.capabilities().chat {
            return Err(LlmError::Unsupported("chat"));
        }
        let s = &self.settings;
        let chat = build_zero_shot_request(f);
        let req = ChatCompletionRequest {
            model: s.model.clone(),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: chat.system_message,
                },
                ChatMessage {
                    role: "user".into(),
                    content: chat.user_message,
                },
            ],
            max_tokens: s.max_tokens.max(3),
            temperature: s.temperature,
        };
        let resp = s.retry.run(|| self.backend.chat(&req))?;
        let label = parse_completion(resp.text().unwrap_or_default())?;
        Ok(Prediction::from_probability(self.surrogate(label)))
    }
}

pub fn predict_llm(client: &LlmClient<'_>, mode: LlmMode, f: &HistoryFeatures) -> Result<Prediction, LlmError> {
    match mode {
        LlmMode::Finetuned(t) => client.finetuned(t, f),
        LlmMode::ZeroShot => client.zero_shot(f),
    }
}

/// Predicts every point with at most `max_in_flight` concurrent requests.
/// Results keep the input order.
pub fn predict_many(
    client: &LlmClient<'_>,
    mode: LlmMode,
    points: &[HistoryFeatures],
) -> Result<Vec<Result<Prediction, LlmError>>, LlmError> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(client.settings.max_in_flight.max(1))
        .build()
        .map_err(|e| LlmError::Transport(e.to_string()))?;
    debug!("issuing {} {:?} requests", points.len(), mode);
    Ok(pool.install(|| points.par_iter().map(|f| predict_llm(client, mode, f)).collect()))
}
