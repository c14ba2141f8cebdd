//! Chat-completion client used for external descriptions and rubric judging.

use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::{build_generation_prompt, build_judge_prompt, JUDGE_CRITERIA};
use super::DomainSpec;
use crate::data::EventSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatClientConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no header.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// First retry delay; doubles on every further attempt.
    pub backoff_ms: u64,
    pub temperature: f64,
    /// Upper bound on requests in flight.
    pub max_concurrency: usize,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
            temperature: 0.0,
            max_concurrency: 4,
        }
    }
}

pub struct ChatClient {
    cfg: ChatClientConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
}

enum Attempt {
    Done(Result<String>),
    Retry(Error),
}

impl ChatClient {
    pub fn new(cfg: ChatClientConfig) -> Result<Self> {
        if !(cfg.timeout_secs > 0.0) {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        if cfg.max_concurrency == 0 {
            return Err(Error::Config("max_concurrency must be at least 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self { cfg, http, api_key })
    }

    pub fn config(&self) -> &ChatClientConfig {
        &self.cfg
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.http.post(&self.cfg.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Error::Transport(e.to_string())),
        };
        if status.is_server_error() || status.as_u16() == 429 {
            return Attempt::Retry(Error::Transport(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Attempt::Done(Err(Error::Transport(format!("HTTP {status}: {text}"))));
        }
        let parsed: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => return Attempt::Done(Err(Error::Transport(format!("bad response body: {e}")))),
        };
        let content = parsed["choices"][0]["message"]["content"]
            .as_str()
            .unwrap_or("")
            .trim();
        if content.is_empty() {
            return Attempt::Done(Err(Error::EmptyCompletion));
        }
        Attempt::Done(Ok(content.to_string()))
    }

    /// One chat completion; transport errors, 429 and 5xx are retried with
    /// exponential backoff.
    pub fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": self.cfg.temperature,
        });
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(r) => return r,
                Attempt::Retry(e) if attempt >= self.cfg.max_retries => return Err(e),
                Attempt::Retry(e) => {
                    log::warn!("chat request failed ({e}); retry {} in {delay:?}", attempt + 1);
                    thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.max_concurrency)
            .build()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

pub fn llm_describe(seq: &EventSequence, spec: &DomainSpec, client: &ChatClient) -> Result<String> {
    let (system, user) = build_generation_prompt(seq, spec)?;
    client.complete(&system, &user)
}

/// Descriptions for many sequences, at most `max_concurrency` in flight;
/// results keep the input order.
pub fn describe_all(seqs: &[EventSequence], spec: &DomainSpec, client: &ChatClient) -> Result<Vec<Result<String>>> {
    Ok(client
        .pool()?
        .install(|| seqs.par_iter().map(|s| llm_describe(s, spec, client)).collect()))
}

/// Five rubric scores, each 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub accuracy: u8,
    pub coverage: u8,
    pub fidelity: u8,
    pub clarity: u8,
    pub conciseness: u8,
}

impl JudgeScores {
    pub fn as_array(&self) -> [u8; 5] {
        [self.accuracy, self.coverage, self.fidelity, self.clarity, self.conciseness]
    }

    fn from_array(v: [u8; 5]) -> Self {
        Self {
            accuracy: v[0],
            coverage: v[1],
            fidelity: v[2],
            clarity: v[3],
            conciseness: v[4],
        }
    }
}

fn score(raw: &str, value: &str, name: &str) -> Result<u8> {
    let err = |m: String| Error::JudgeParse { message: m, raw: raw.to_string() };
    let v: i64 = value
        .trim()
        .trim_end_matches(['.', ','])
        .parse()
        .map_err(|_| err(format!("score for {name} is not an integer: {value:?}")))?;
    if !(1..=5).contains(&v) {
        return Err(err(format!("score out of range: {name}={v}")));
    }
    Ok(v as u8)
}

/// Accepts `accuracy=<n>; coverage=<n>; ...` (any order, case-insensitive)
/// or five comma-separated integers in criterion order.
pub fn parse_judge_scores(raw: &str) -> Result<JudgeScores> {
    let err = |m: String| Error::JudgeParse { message: m, raw: raw.to_string() };
    let text = raw.trim();
    if !text.contains('=') {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 5 {
            return Err(err(format!("expected five scores, found {}", parts.len())));
        }
        let mut v = [0u8; 5];
        for (slot, (part, (name, _))) in v.iter_mut().zip(parts.iter().zip(JUDGE_CRITERIA)) {
            *slot = score(raw, part, name)?;
        }
        return Ok(JudgeScores::from_array(v));
    }
    let mut v = [None; 5];
    for pair in text.split([';', '\n']) {
        let Some((key, value)) = pair.split_once('=') else { continue };
        let key = key.trim().trim_start_matches(['-', '*', ' ']).to_ascii_lowercase();
        if let Some(i) = JUDGE_CRITERIA.iter().position(|(n, _)| *n == key) {
            v[i] = Some(score(raw, value, JUDGE_CRITERIA[i].0)?);
        }
    }
    let mut out = [0u8; 5];
    for (i, slot) in v.iter().enumerate() {
        out[i] = slot.ok_or_else(|| err(format!("missing score for {}", JUDGE_CRITERIA[i].0)))?;
    }
    Ok(JudgeScores::from_array(out))
}

pub fn rubric_evaluate(
    description: &str,
    seq: &EventSequence,
    spec: &DomainSpec,
    client: &ChatClient,
) -> Result<JudgeScores> {
    let (system, user) = build_judge_prompt(description, seq, spec)?;
    parse_judge_scores(&client.complete(&system, &user)?)
}

/// Judge many (description, sequence) pairs with bounded concurrency.
pub fn judge_all(
    pairs: &[(&str, &EventSequence)],
    spec: &DomainSpec,
    client: &ChatClient,
) -> Result<Vec<Result<JudgeScores>>> {
    Ok(client.pool()?.install(|| {
        pairs
            .par_iter()
            .map(|(d, s)| rubric_evaluate(d, s, spec, client))
            .collect()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub accuracy: f64,
    pub coverage: f64,
    pub fidelity: f64,
    pub clarity: f64,
    pub conciseness: f64,
    pub n: usize,
}

/// Per-criterion arithmetic mean.
pub fn mean_scores(scores: &[JudgeScores]) -> Result<MeanScores> {
    if scores.is_empty() {
        return Err(Error::Empty("judge scores"));
    }
    let mut sums = [0f64; 5];
    for s in scores {
        for (acc, v) in sums.iter_mut().zip(s.as_array()) {
            *acc += v as f64;
        }
    }
    let n = scores.len() as f64;
    Ok(MeanScores {
        accuracy: sums[0] / n,
        coverage: sums[1] / n,
        fidelity: sums[2] / n,
        clarity: sums[3] / n,
        conciseness: sums[4] / n,
        n: scores.len(),
    })
}
