//! Zero-shot reasoning through a chat-completion endpoint.
//!
//! One user message per clip, bounded concurrency, retries with exponential
//! backoff on transport errors, 5xx and 429, and a per-clip audit transcript.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use patchtrace_core::prompt::{build_prompt_for_trace, parse_category};
use patchtrace_core::{CategorySpace, Prediction, PredictionRecord, ReasoningTrace};

use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "LLM_API_KEY";
pub const METHOD_NAME: &str = "llm_reasoner";

#[derive(Debug, Clone, PartialEq)]
pub struct Endpoint {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    /// Decoding temperature sent with the request.
    pub request_temperature: f64,
    pub timeout: Duration,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            request_temperature: 0.0,
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads the credential from `LLM_API_KEY` unless one is already set.
    pub fn with_env_key(mut self) -> Self {
        if self.api_key.is_none() {
            self.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        }
        self
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// `max_attempts` tries in total; the wait before retry `k` (1-based) is
/// `initial_backoff * 2^(k-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub attempts: u32,
}

enum Attempt {
    Done(String),
    Retry(Error),
    Fail(Error),
}

pub struct LlmClient {
    agent: ureq::Agent,
    endpoint: Endpoint,
    retry: RetryPolicy,
}

impl LlmClient {
    pub fn new(endpoint: Endpoint, retry: RetryPolicy) -> Result<Self> {
        if endpoint.base_url.trim().is_empty() || endpoint.model.trim().is_empty() {
            return Err(Error::EndpointUnconfigured);
        }
        if retry.max_attempts == 0 {
            return Err(Error::Usage("retry attempts must be at least 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { agent, endpoint, retry })
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self.agent.post(self.endpoint.url()).content_type("application/json");
        if let Some(key) = &self.endpoint.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(Error::Timeout),
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(Error::Timeout),
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        match status {
            200..=299 => match extract_content(&text) {
                Ok(content) => Attempt::Done(content),
                Err(e) => Attempt::Fail(e),
            },
            429 => Attempt::Retry(Error::RateLimited {
                attempts: self.retry.max_attempts,
            }),
            500..=599 => Attempt::Retry(Error::HttpStatus(status)),
            _ => Attempt::Fail(Error::HttpStatus(status)),
        }
    }

    /// Sends one prompt and returns the assistant message text.
    pub fn query(&self, prompt: &str) -> Result<Reply> {
        let (result, attempts) = self.query_counted(prompt);
        result.map(|text| Reply { text, attempts })
    }

    /// Like [`query`](Self::query) but also reports the attempt count on failure.
    pub fn query_counted(&self, prompt: &str) -> (Result<String>, u32) {
        let body = json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.endpoint.request_temperature,
        })
        .to_string();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    if attempts > 1 {
                        log::info!("request succeeded after {attempts} attempts");
                    }
                    return (Ok(text), attempts);
                }
                Attempt::Fail(e) => return (Err(e), attempts),
                Attempt::Retry(e) if attempts >= self.retry.max_attempts => {
                    let e = match e {
                        Error::RateLimited { .. } => Error::RateLimited { attempts },
                        other => other,
                    };
                    return (Err(e), attempts);
                }
                Attempt::Retry(e) => {
                    let wait = self.retry.backoff(attempts);
                    log::warn!("attempt {attempts} failed ({e}); retrying in {wait:?}");
                    thread::sleep(wait);
                }
            }
        }
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion response.
pub fn extract_content(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptEntry {
    pub clip_id: String,
    pub prompt_sha256: String,
    pub response: Option<String>,
    /// "parsed", "unparseable" or "error".
    pub outcome: &'static str,
    pub category: Option<String>,
    pub attempts: u32,
    pub error: Option<String>,
}

pub fn write_transcript(path: &Path, entries: &[TranscriptEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        let line = serde_json::to_string(e).map_err(|err| Error::MalformedResponse(err.to_string()))?;
        let _ = writeln!(out, "{line}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Asks the model about every trace with at most `max_in_flight` requests
/// outstanding. Results come back in trace order. Failed requests and
/// unparseable answers become [`Prediction::Unscored`].
pub fn llm_predict(
    client: &LlmClient,
    traces: &[ReasoningTrace],
    categories: &CategorySpace,
    max_in_flight: usize,
) -> Result<(Vec<PredictionRecord>, Vec<TranscriptEntry>)> {
    let prompts = traces
        .iter()
        .map(|t| build_prompt_for_trace(t, categories))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Usage(e.to_string()))?;
    let results: Vec<(PredictionRecord, TranscriptEntry)> = pool.install(|| {
        traces
            .par_iter()
            .zip(prompts.par_iter())
            .map(|(trace, prompt)| ask_one(client, trace.clip_id(), prompt, categories))
            .collect()
    });
    Ok(results.into_iter().unzip())
}

fn ask_one(
    client: &LlmClient,
    clip_id: &str,
    prompt: &str,
    categories: &CategorySpace,
) -> (PredictionRecord, TranscriptEntry) {
    let mut entry = TranscriptEntry {
        clip_id: clip_id.to_string(),
        prompt_sha256: sha256_hex(prompt),
        response: None,
        outcome: "error",
        category: None,
        attempts: 0,
        error: None,
    };
    let (result, attempts) = client.query_counted(prompt);
    entry.attempts = attempts;
    let predicted = match result {
        Ok(text) => {
            let parsed = parse_category(&text, categories);
            entry.response = Some(text);
            match parsed {
                Ok(idx) => {
                    entry.outcome = "parsed";
                    entry.category = categories.name(idx).map(str::to_owned);
                    Prediction::Category(idx)
                }
                Err(_) => {
                    entry.outcome = "unparseable";
                    Prediction::Unscored
                }
            }
        }
        Err(e) => {
            log::warn!("clip {clip_id}: {e}");
            entry.error = Some(e.to_string());
            Prediction::Unscored
        }
    };
    (PredictionRecord::new(clip_id, METHOD_NAME, predicted), entry)
}
