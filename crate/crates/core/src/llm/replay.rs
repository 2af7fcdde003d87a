//! Record/replay of backend traffic keyed by a hash of the request body.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::backend::{
    Capabilities, ChatCompletionRequest, ChatCompletionResponse, CompletionRequest, CompletionResponse, LlmBackend,
};
use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub hash: String,
    pub kind: String,
    pub response: Value,
}

/// Hex SHA-256 of `kind` and the request's JSON encoding.
pub fn request_hash<T: Serialize>(kind: &str, req: &T) -> Result<String, LlmError> {
    let body = serde_json::to_vec(req)?;
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(&body);
    Ok(hex::encode(h.finalize()))
}

/// Forwards to `inner` and keeps every response.
pub struct RecordingBackend<B> {
    inner: B,
    records: Mutex<BTreeMap<String, ReplayRecord>>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            records: Mutex::new(BTreeMap::new()),
        }
    }

    fn keep<T: Serialize>(&self, kind: &str, hash: String, resp: &T) -> Result<(), LlmError> {
        let record = ReplayRecord {
            hash: hash.clone(),
            kind: kind.to_string(),
            response: serde_json::to_value(resp)?,
        };
        self.records
            .lock()
            .expect("recorder lock poisoned")
            .entry(hash)
            .or_insert(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("recorder lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes one JSON record per line, ordered by hash.
    pub fn save<W: Write>(&self, mut out: W) -> Result<usize, LlmError> {
        let records = self.records.lock().expect("recorder lock poisoned");
        for r in records.values() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(records.len())
    }
}

impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        let resp = self.inner.complete(req)?;
        self.keep("completion", request_hash("completion", req)?, &resp)?;
        Ok(resp)
    }

    fn chat(&self, req: &ChatCompletionRequest) -> Result<ChatCompletionResponse, LlmError> {
        let resp = self.inner.chat(req)?;
        self.keep("chat", request_hash("chat", req)?, &resp)?;
        Ok(resp)
    }
}

/// Serves recorded responses; an unseen request is an error.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    records: BTreeMap<String, ReplayRecord>,
}

impl ReplayBackend {
    pub fn load<R: BufRead>(input: R) -> Result<Self, LlmError> {
        let mut records = BTreeMap::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ReplayRecord = serde_json::from_str(&line)?;
            records.entry(r.hash.clone()).or_insert(r);
        }
        Ok(ReplayBackend { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn lookup<T: serde::de::DeserializeOwned>(&self, kind: &str, hash: &str) -> Result<T, LlmError> {
        let r = self
            .records
            .get(hash)
            .filter(|r| r.kind == kind)
            .ok_or_else(|| LlmError::Replay(format!("no recorded {kind} response for {hash}")))?;
        Ok(serde_json::from_value(r.response.clone())?)
    }
}

impl LlmBackend for ReplayBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            completion_logprobs: true,
            chat: true,
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        self.lookup("completion", &request_hash("completion", req)?)
    }

    fn chat(&self, req: &ChatCompletionRequest) -> Result<ChatCompletionResponse, LlmError> {
        self.lookup("chat", &request_hash("chat", req)?)
    }
}
