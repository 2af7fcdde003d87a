//! OpenAI-compatible wire types, the backend interface and the closed-form
//! mock used for offline runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::prompt::{parse_prompt, PromptTemplate};
use super::response::TokenLogprobs;
use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    /// Number of alternatives to return per position.
    pub logprobs: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionLogprobs {
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub top_logprobs: Vec<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionChoice {
    pub text: String,
    #[serde(default)]
    pub logprobs: Option<CompletionLogprobs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<CompletionChoice>,
}

impl CompletionResponse {
    pub fn text(&self) -> Option<&str> {
        self.choices.first().map(|c| c.text.as_str())
    }

    /// Candidates at the first generated position, if the provider sent any.
    pub fn first_token_logprobs(&self) -> Option<TokenLogprobs> {
        let top = self.choices.first()?.logprobs.as_ref()?.top_logprobs.first()?;
        (!top.is_empty()).then(|| TokenLogprobs(top.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatCompletionRequest {
    pub fn system(&self) -> Option<&str> {
        self.role("system")
    }

    pub fn user(&self) -> Option<&str> {
        self.role("user")
    }

    fn role(&self, role: &str) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponseMessage {
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatResponseMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatCompletionResponse {
    pub choices: Vec<ChatChoice>,
}

impl ChatCompletionResponse {
    pub fn text(&self) -> Option<&str> {
        self.choices.first()?.message.content.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub completion_logprobs: bool,
    pub chat: bool,
}

/// A provider of completions. Implementations must be safe to call from
/// several threads at once.
pub trait LlmBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
    fn chat(&self, req: &ChatCompletionRequest) -> Result<ChatCompletionResponse, LlmError>;
}

/// Which template a mock accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateFilter {
    #[default]
    Any,
    Minimal,
    Extended,
}

impl TemplateFilter {
    fn accepts(self, t: PromptTemplate) -> bool {
        match self {
            TemplateFilter::Any => true,
            TemplateFilter::Minimal => t == PromptTemplate::Minimal,
            TemplateFilter::Extended => t == PromptTemplate::Extended,
        }
    }
}

/// Answers with `p = sigmoid(w . [B, C, D, E])` read back from the prompt.
///
/// Completions carry logprobs `{"C": ln p, "W": ln(1 - p)}`; chat replies
/// carry only the word for the more likely side.
#[derive(Debug, Clone, PartialEq)]
pub struct MockBackend {
    pub weights: [f64; 4],
    pub accepts: TemplateFilter,
}

/// Smallest probability the mock reports, so both logprobs stay finite.
const MOCK_P_FLOOR: f64 = 1e-12;

pub fn mock_backend(weights: [f64; 4]) -> MockBackend {
    MockBackend {
        weights,
        accepts: TemplateFilter::Any,
    }
}

impl MockBackend {
    /// The mock's answer for a prompt, before the logprob floor.
    pub fn probability(&self, prompt: &str) -> Result<f64, LlmError> {
        let parsed = parse_prompt(prompt)?;
        if !self.accepts.accepts(parsed.template) {
            return Err(LlmError::MalformedPrompt(format!(
                "{:?} prompt sent to a mock that accepts {:?}",
                parsed.template, self.accepts
            )));
        }
        let z: f64 = self.weights.iter().zip(parsed.counts()).map(|(w, x)| w * x).sum();
        Ok(crate::logreg::sigmoid(z))
    }
}

impl LlmBackend for MockBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            completion_logprobs: true,
            chat: true,
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let p = self.probability(&req.prompt)?;
        let pc = p.clamp(MOCK_P_FLOOR, 1.0 - MOCK_P_FLOOR);
        let top = BTreeMap::from([("C".to_string(), pc.ln()), ("W".to_string(), (1.0 - pc).ln())]);
        let word = if p >= 0.5 { "CORRECT" } else { "WRONG" };
        Ok(CompletionResponse {
            choices: vec![CompletionChoice {
                text: word.to_string(),
                logprobs: Some(CompletionLogprobs {
                    tokens: vec![word[..1].to_string()],
                    top_logprobs: vec![top],
                }),
            }],
        })
    }

    fn chat(&self, req: &ChatCompletionRequest) -> Result<ChatCompletionResponse, LlmError> {
        let user = req
            .user()
            .ok_or_else(|| LlmError::MalformedPrompt("chat request without a user message".into()))?;
        let p = self.probability(user)?;
        let word = if p >= 0.5 { "CORRECT" } else { "WRONG" };
        Ok(ChatCompletionResponse {
            choices: vec![ChatChoice {
                message: ChatResponseMessage {
                    content: Some(word.to_string()),
                },
            }],
        })
    }
}
