use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::LlmError;
use crate::dataset::Dataset;
use crate::features::{sequence_features, HistoryFeatures};
use crate::prediction::Label;

/// Instruction sent as the system message of every zero-shot request.
pub const SYSTEM_MESSAGE: &str = "You are an instructor and want to predict whether a student will get a question CORRECT or WRONG. The only information you have is the student's previous answers to a series of related questions. You know how many questions they got CORRECT and how many they got WRONG. Based on this information, you should make a prediction by outputting a single word: CORRECT if you think the student will answer the next question correctly, and WRONG if you think the student will answer the next question wrong. Output no other word at all, this is very important. Try to estimate the knowledge of the student before making your prediction.";

pub const RESPONSE_STUB: &str = "Student response: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTemplate {
    Minimal,
    Extended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    /// Space out the digits of every number, ids included.
    #[serde(default = "yes")]
    pub split_digits: bool,
}

fn yes() -> bool {
    true
}

impl Default for PromptOptions {
    fn default() -> Self {
        PromptOptions { split_digits: true }
    }
}

/// `342` becomes `"3 4 2"`.
pub fn space_digits(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() * 2);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(ch);
    }
    out
}

/// Inverse of [`space_digits`]; also accepts unspaced numbers.
pub fn unspace_digits(s: &str) -> Option<u64> {
    let spaced = s.len() > 1 && s.contains(' ');
    if spaced {
        let ok = s
            .chars()
            .enumerate()
            .all(|(i, c)| if i % 2 == 0 { c.is_ascii_digit() } else { c == ' ' });
        if !ok || s.len().is_multiple_of(2) {
            return None;
        }
    } else if s.is_empty() || !s.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let digits: String = s.chars().filter(|c| *c != ' ').collect();
    if digits.len() > 1 && digits.starts_with('0') {
        return None;
    }
    digits.parse().ok()
}

fn num(n: u64, opts: PromptOptions) -> String {
    if opts.split_digits {
        space_digits(n)
    } else {
        n.to_string()
    }
}

pub fn render_prompt(template: PromptTemplate, f: &HistoryFeatures, opts: PromptOptions) -> String {
    let b = num(f.total_correct, opts);
    let c = num(f.total_wrong, opts);
    let a = num(u64::from(f.question_id.0), opts);
    let tail =
        format!("Total correct until now: {b}\nTotal wrong until now: {c}\nCurrent question ID: {a}\n{RESPONSE_STUB}");
    match template {
        PromptTemplate::Minimal => tail,
        PromptTemplate::Extended => {
            let k = num(u64::from(f.skill_id.0), opts);
            let d = num(f.skill_correct, opts);
            let e = num(f.skill_wrong, opts);
            format!(
                "Current skill ID: {k}\nTotal correct for prior questions with skill ID {k}: {d}\nTotal wrong for prior questions with skill ID {k}: {e}\n{tail}"
            )
        }
    }
}

pub fn render_minimal_prompt(f: &HistoryFeatures) -> String {
    render_prompt(PromptTemplate::Minimal, f, PromptOptions::default())
}

pub fn render_extended_prompt(f: &HistoryFeatures) -> String {
    render_prompt(PromptTemplate::Extended, f, PromptOptions::default())
}

/// Numbers recovered from a rendered prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub template: PromptTemplate,
    pub question_id: u64,
    pub total_correct: u64,
    pub total_wrong: u64,
    /// `(K, D, E)` for the extended template.
    pub skill: Option<(u64, u64, u64)>,
}

impl ParsedPrompt {
    /// `[B, C, D, E]`, with `D = E = 0` for the minimal template.
    pub fn counts(&self) -> [f64; 4] {
        let (d, e) = self.skill.map_or((0, 0), |(_, d, e)| (d, e));
        [self.total_correct as f64, self.total_wrong as f64, d as f64, e as f64]
    }
}

fn field(line: Option<&str>, prefix: &str) -> Result<u64, LlmError> {
    let malformed = || LlmError::MalformedPrompt(format!("expected a line starting {prefix:?}"));
    let rest = line.and_then(|l| l.strip_prefix(prefix)).ok_or_else(malformed)?;
    unspace_digits(rest).ok_or_else(malformed)
}

/// Parses either template back into its numbers.
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt, LlmError> {
    let body = prompt
        .strip_suffix(RESPONSE_STUB)
        .ok_or_else(|| LlmError::MalformedPrompt("missing response stub".into()))?;
    let lines: Vec<&str> = body.split('\n').collect();
    let (template, skill, rest) = match lines.len() {
        4 => (PromptTemplate::Minimal, None, &lines[..3]),
        7 => {
            let k = field(lines.first().copied(), "Current skill ID: ")?;
            let ks = lines[0]["Current skill ID: ".len()..].to_string();
            let d = field(
                Some(lines[1]),
                &format!("Total correct for prior questions with skill ID {ks}: "),
            )?;
            let e = field(
                Some(lines[2]),
                &format!("Total wrong for prior questions with skill ID {ks}: "),
            )?;
            (PromptTemplate::Extended, Some((k, d, e)), &lines[3..6])
        }
        n => return Err(LlmError::MalformedPrompt(format!("unexpected line count {n}"))),
    };
    if lines.last() != Some(&"") {
        return Err(LlmError::MalformedPrompt("response stub must start a line".into()));
    }
    Ok(ParsedPrompt {
        template,
        total_correct: field(rest.first().copied(), "Total correct until now: ")?,
        total_wrong: field(rest.get(1).copied(), "Total wrong until now: ")?,
        question_id: field(rest.get(2).copied(), "Current question ID: ")?,
        skill,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_message: String,
    pub user_message: String,
}

pub fn build_zero_shot_request(f: &HistoryFeatures) -> ChatRequest {
    ChatRequest {
        system_message: SYSTEM_MESSAGE.to_string(),
        user_message: render_minimal_prompt(f),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptExample {
    pub prompt: String,
    pub completion: Label,
}

/// Writes one JSON line per (student, position), students in dataset order.
/// Returns the number of records.
pub fn export_finetune_corpus<W: Write>(
    train: &Dataset,
    template: PromptTemplate,
    opts: PromptOptions,
    mut sink: W,
) -> Result<usize, LlmError> {
    let mut n = 0;
    for seq in &train.sequences {
        for (f, rec) in sequence_features(seq).iter().zip(&seq.records) {
            let ex = PromptExample {
                prompt: render_prompt(template, f, opts),
                completion: Label::from_correct(rec.correct),
            };
            serde_json::to_writer(&mut sink, &ex)?;
            sink.write_all(b"\n")?;
            n += 1;
        }
    }
    sink.flush()?;
    Ok(n)
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<PromptExample>, LlmError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
