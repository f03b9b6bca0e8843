//! HTTP client for a model served behind the JSON scoring protocol.
//!
//! ```text
//! GET  /v1/models -> {"models":[{"id":..,"vocab_size":..}]}
//! POST /v1/score  {"model","text"} -> {"tokens":[{"text","logprob"}]}
//! POST /v1/topk   {"model","prefix_text","k"} -> {"candidates":[{"text","logprob"}]}
//! errors: 4xx/5xx with {"error": string}
//! ```
//!
//! Token ids are assigned locally in first-seen order and are only
//! meaningful within one client; persisted artifacts carry token texts.

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{detokenize, Candidate, LanguageModel, ModelKind, NextTokenDistribution, SequenceScore, Token, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireToken {
    pub text: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub tokens: Vec<WireToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRequest {
    pub model: String,
    pub prefix_text: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKResponse {
    pub candidates: Vec<WireToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEndpoint {
    pub base_url: String,
    pub model_id: String,
    pub timeout_secs: f64,
    /// Extra attempts after a transport failure. Server replies are never retried.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
    pub auth_token: Option<String>,
}

impl Default for RemoteEndpoint {
    fn default() -> Self {
        RemoteEndpoint {
            base_url: String::new(),
            model_id: String::new(),
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_ms: 200,
            max_in_flight: 8,
            auth_token: None,
        }
    }
}

impl RemoteEndpoint {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        RemoteEndpoint {
            base_url: base_url.into(),
            model_id: model_id.into(),
            ..Default::default()
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Gate {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Default)]
struct Interner {
    ids: HashMap<Arc<str>, u32>,
}

impl Interner {
    fn token(&mut self, text: &str) -> Token {
        if let Some((k, &id)) = self.ids.get_key_value(text) {
            return Token { id, text: k.clone() };
        }
        let id = self.ids.len() as u32;
        let text: Arc<str> = text.into();
        self.ids.insert(text.clone(), id);
        Token { id, text }
    }
}

pub struct RemoteModel {
    endpoint: RemoteEndpoint,
    client: Client,
    base: String,
    gate: Gate,
    interner: Mutex<Interner>,
}

impl RemoteModel {
    pub fn new(endpoint: RemoteEndpoint) -> Result<Self> {
        if endpoint.model_id.is_empty() {
            return Err(Error::Config("remote endpoint needs a model id".into()));
        }
        if endpoint.timeout_secs.is_nan() || endpoint.timeout_secs <= 0.0 {
            return Err(Error::Config("remote timeout must be positive".into()));
        }
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| Error::ModelUnavailable(e.to_string()))?;
        Ok(RemoteModel {
            base: endpoint.base_url.trim_end_matches('/').to_string(),
            gate: Gate::new(endpoint.max_in_flight),
            endpoint,
            client,
            interner: Mutex::new(Interner::default()),
        })
    }

    pub fn endpoint(&self) -> &RemoteEndpoint {
        &self.endpoint
    }

    fn send<T: DeserializeOwned>(&self, build: impl Fn() -> RequestBuilder) -> Result<T> {
        let _permit = self.gate.acquire();
        let mut attempt = 0;
        let resp = loop {
            let mut req = build();
            if let Some(tok) = &self.endpoint.auth_token {
                req = req.bearer_auth(tok);
            }
            match req.send() {
                Ok(r) => break r,
                Err(e) if attempt < self.endpoint.max_retries => {
                    attempt += 1;
                    let wait = self.endpoint.backoff_ms.saturating_mul(1 << (attempt - 1).min(10));
                    thread::sleep(Duration::from_millis(wait));
                    let _ = e;
                }
                Err(e) => {
                    return Err(Error::ModelUnavailable(format!(
                        "{} after {} attempts: {e}",
                        self.base,
                        attempt + 1
                    )))
                }
            }
        };
        let status = resp.status();
        let body = resp
            .bytes()
            .map_err(|e| Error::ModelUnavailable(format!("reading reply: {e}")))?;
        if !status.is_success() {
            let message = match serde_json::from_slice::<ErrorResponse>(&body) {
                Ok(e) => e.error,
                Err(_) => String::from_utf8_lossy(&body).into_owned(),
            };
            return Err(Error::ServerError {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_slice(&body).map_err(|e| Error::Protocol(format!("malformed reply: {e}")))
    }

    pub fn list_models(&self) -> Result<Vec<ModelInfo>> {
        let url = format!("{}/v1/models", self.base);
        let r: ModelsResponse = self.send(|| self.client.get(&url))?;
        Ok(r.models)
    }

    fn check_logprob(lp: f64) -> Result<()> {
        if lp.is_finite() && lp <= 0.0 {
            Ok(())
        } else {
            Err(Error::Protocol(format!("logprob {lp} is not a finite value <= 0")))
        }
    }

    /// Tokens and their logprobs for `text`, validated against the protocol.
    pub fn remote_score(&self, text: &str) -> Result<(Vec<Token>, SequenceScore)> {
        let url = format!("{}/v1/score", self.base);
        let body = ScoreRequest {
            model: self.endpoint.model_id.clone(),
            text: text.to_string(),
        };
        let r: ScoreResponse = self.send(|| self.client.post(&url).json(&body))?;
        let joined: String = r.tokens.iter().map(|t| t.text.as_str()).collect();
        if joined != text {
            return Err(Error::Protocol("token texts do not concatenate to the input".into()));
        }
        let mut interner = self.interner.lock().expect("interner poisoned");
        let mut tokens = Vec::with_capacity(r.tokens.len());
        let mut lps = Vec::with_capacity(r.tokens.len());
        for t in &r.tokens {
            Self::check_logprob(t.logprob)?;
            tokens.push(interner.token(&t.text));
            lps.push(t.logprob);
        }
        Ok((tokens, SequenceScore::new(lps)?))
    }

    pub fn remote_top_k(&self, prefix_text: &str, k: usize) -> Result<NextTokenDistribution> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let url = format!("{}/v1/topk", self.base);
        let body = TopKRequest {
            model: self.endpoint.model_id.clone(),
            prefix_text: prefix_text.to_string(),
            k,
        };
        let r: TopKResponse = self.send(|| self.client.post(&url).json(&body))?;
        if r.candidates.len() > k {
            return Err(Error::Protocol(format!(
                "asked for {k} candidates, got {}",
                r.candidates.len()
            )));
        }
        if r.candidates.is_empty() {
            return Err(Error::Protocol("empty candidate list".into()));
        }
        let mut interner = self.interner.lock().expect("interner poisoned");
        let mut candidates = Vec::with_capacity(r.candidates.len());
        for (i, c) in r.candidates.iter().enumerate() {
            Self::check_logprob(c.logprob)?;
            if c.text.is_empty() {
                return Err(Error::Protocol("empty candidate text".into()));
            }
            if i > 0 && c.logprob > r.candidates[i - 1].logprob {
                return Err(Error::Protocol("candidates are not sorted by logprob".into()));
            }
            candidates.push(Candidate {
                token: interner.token(&c.text),
                logprob: c.logprob,
            });
        }
        Ok(NextTokenDistribution {
            truncation: candidates.len(),
            candidates,
        })
    }
}

impl LanguageModel for RemoteModel {
    fn model_id(&self) -> &str {
        &self.endpoint.model_id
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Remote
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        Ok(self.remote_score(text)?.0)
    }

    fn score_sequence(&self, tokens: &[Token]) -> Result<SequenceScore> {
        Ok(self.remote_score(&detokenize(tokens))?.1)
    }

    fn top_k(&self, prefix: &[Token], k: usize) -> Result<NextTokenDistribution> {
        self.remote_top_k(&detokenize(prefix), k)
    }

    fn score_text(&self, text: &str) -> Result<(Vec<Token>, SequenceScore)> {
        self.remote_score(text)
    }

    fn top_k_text(&self, prefix: &str, k: usize) -> Result<NextTokenDistribution> {
        self.remote_top_k(prefix, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interner_is_stable() {
        let mut i = Interner::default();
        let a = i.token("a");
        let b = i.token("b");
        assert_eq!(i.token("a"), a);
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn gate_bounds_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let gate = Arc::new(Gate::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, live, peak) = (gate.clone(), live.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = gate.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn unreachable_server_is_unavailable() {
        let ep = RemoteEndpoint {
            max_retries: 1,
            backoff_ms: 1,
            timeout_secs: 2.0,
            ..RemoteEndpoint::new("http://127.0.0.1:9", "m")
        };
        let m = RemoteModel::new(ep).unwrap();
        assert!(matches!(m.remote_score("x"), Err(Error::ModelUnavailable(_))));
    }
}
