use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::prediction::Label;

/// Trim, uppercase, then require exactly `CORRECT` or `WRONG`.
pub fn parse_completion(raw: &str) -> Result<Label, LlmError> {
    match raw.trim().to_uppercase().as_str() {
        "CORRECT" => Ok(Label::Correct),
        "WRONG" => Ok(Label::Wrong),
        _ => Err(LlmError::ParseFailure { raw: raw.to_string() }),
    }
}

/// Candidate tokens for the first completion position with their
/// log-probabilities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenLogprobs(pub BTreeMap<String, f64>);

impl TokenLogprobs {
    pub fn new(map: BTreeMap<String, f64>) -> Result<Self, LlmError> {
        let t = TokenLogprobs(map);
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.0.iter().find(|(_, lp)| !lp.is_finite() || **lp > 0.0) {
            Some((tok, lp)) => Err(LlmError::InvalidLogprob {
                token: tok.clone(),
                value: *lp,
            }),
            None => Ok(()),
        }
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for TokenLogprobs {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        TokenLogprobs(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

fn is_prefix_of(token: &str, word: &str) -> bool {
    let t = token.trim().to_uppercase();
    !t.is_empty() && word.starts_with(&t)
}

/// Probability mass of tokens that start `CORRECT` divided by the mass of
/// tokens that start either word.
pub fn normalize_logprobs(t: &TokenLogprobs) -> Result<f64, LlmError> {
    t.validate()?;
    let mut p_c = 0.0;
    let mut p_w = 0.0;
    for (tok, lp) in &t.0 {
        if is_prefix_of(tok, "CORRECT") {
            p_c += lp.exp();
        } else if is_prefix_of(tok, "WRONG") {
            p_w += lp.exp();
        }
    }
    if p_c + p_w <= 0.0 {
        return Err(LlmError::NoSignal);
    }
    // same ratio as p_c / (p_c + p_w), written so each rounding step is
    // monotone in p_c
    if p_c == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 / (1.0 + p_w / p_c))
}
