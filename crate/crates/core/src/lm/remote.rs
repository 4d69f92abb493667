//! HTTP client (and the matching request handler) for raw next-token logits.
//!
//! Wire format: `POST /v1/logits` with body `{"prefix_ids": [...]}`, answered
//! by `{"logits": [...]}`. Both sides send their vocabulary hash in
//! `X-Vocab-Hash`; a bearer token from `INKMARK_API_TOKEN` is attached when
//! set.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{LogitSource, LogitVector};
use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};

pub const LOGITS_PATH: &str = "/v1/logits";
pub const VOCAB_HASH_HEADER: &str = "X-Vocab-Hash";
pub const TOKEN_ENV: &str = "INKMARK_API_TOKEN";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogitsRequest {
    pub prefix_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Extra attempts after the first one for transient failures.
    pub max_retries: usize,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
        }
    }
}

/// A [`LogitSource`] backed by a remote logit endpoint.
pub struct RemoteLogits {
    url: String,
    vocab_hash: String,
    vocab_size: usize,
    token: Option<String>,
    config: RemoteConfig,
    agent: ureq::Agent,
    retries: AtomicUsize,
}

impl RemoteLogits {
    pub fn new(endpoint: &str, vocab: &Vocabulary, config: RemoteConfig) -> Self {
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with(LOGITS_PATH) {
            base.to_string()
        } else {
            format!("{base}{LOGITS_PATH}")
        };
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        Self {
            url,
            vocab_hash: vocab.hash(),
            vocab_size: vocab.len(),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            config,
            agent,
            retries: AtomicUsize::new(0),
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Retries performed so far across all calls.
    pub fn retries(&self) -> usize {
        self.retries.load(Ordering::Relaxed)
    }

    fn attempt(&self, body: &str) -> Attempt {
        let mut req = self
            .agent
            .post(&self.url)
            .set("Content-Type", "application/json")
            .set(VOCAB_HASH_HEADER, &self.vocab_hash);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        match req.send_string(body) {
            Ok(resp) => {
                let remote = resp.header(VOCAB_HASH_HEADER).map(str::to_string);
                match resp.into_string() {
                    Ok(text) => Attempt::Done(self.parse(remote, &text)),
                    Err(e) => Attempt::Transient(format!("reading body: {e}")),
                }
            }
            Err(ureq::Error::Status(409, resp)) => Attempt::Done(Err(Error::VocabularyMismatch {
                local: self.vocab_hash.clone(),
                remote: resp.header(VOCAB_HASH_HEADER).unwrap_or("?").to_string(),
            })),
            Err(ureq::Error::Status(code, _)) if code >= 500 || code == 429 => {
                Attempt::Transient(format!("HTTP {code}"))
            }
            Err(ureq::Error::Status(code, _)) => Attempt::Done(Err(Error::EndpointUnavailable {
                endpoint: self.url.clone(),
                attempts: 1,
                reason: format!("HTTP {code}"),
            })),
            Err(ureq::Error::Transport(t)) => Attempt::Transient(t.to_string()),
        }
    }

    fn parse(&self, remote_hash: Option<String>, text: &str) -> Result<LogitVector> {
        match remote_hash {
            Some(h) if h == self.vocab_hash => {}
            other => {
                return Err(Error::VocabularyMismatch {
                    local: self.vocab_hash.clone(),
                    remote: other.unwrap_or_else(|| "<missing>".into()),
                })
            }
        }
        let resp: LogitsResponse =
            serde_json::from_str(text).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        if resp.logits.len() != self.vocab_size {
            return Err(Error::MalformedResponse(format!(
                "expected {} logits, got {}",
                self.vocab_size,
                resp.logits.len()
            )));
        }
        let logits = LogitVector(resp.logits);
        if !logits.is_finite() {
            return Err(Error::MalformedResponse("non-finite logit".into()));
        }
        Ok(logits)
    }
}

enum Attempt {
    Done(Result<LogitVector>),
    Transient(String),
}

impl LogitSource for RemoteLogits {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logits(&self, prefix: &[TokenId]) -> Result<LogitVector> {
        let body = serde_json::to_string(&LogitsRequest {
            prefix_ids: prefix.to_vec(),
        })
        .expect("request serializes");
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::Relaxed);
                log::warn!("retry {attempt} for {} after: {last}", self.url);
                thread::sleep(self.config.backoff * attempt as u32);
            }
            match self.attempt(&body) {
                Attempt::Done(r) => return r,
                Attempt::Transient(reason) => last = reason,
            }
        }
        Err(Error::EndpointUnavailable {
            endpoint: self.url.clone(),
            attempts: self.config.max_retries + 1,
            reason: last,
        })
    }
}

/// One-shot convenience wrapper around [`RemoteLogits`].
pub fn remote_logits(
    endpoint: &str,
    vocab: &Vocabulary,
    prefix: &[TokenId],
    config: RemoteConfig,
) -> Result<LogitVector> {
    RemoteLogits::new(endpoint, vocab, config).next_logits(prefix)
}

/// Server-side handling of one logits request: returns the HTTP status and
/// JSON body. The caller must echo `local_hash` in `X-Vocab-Hash`.
pub fn handle_logits_request(
    source: &dyn LogitSource,
    local_hash: &str,
    request_hash: Option<&str>,
    body: &str,
) -> (u16, String) {
    if request_hash.is_some_and(|h| h != local_hash) {
        return (409, r#"{"error":"vocabulary hash mismatch"}"#.into());
    }
    let req: LogitsRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(e) => return (400, serde_json::json!({ "error": e.to_string() }).to_string()),
    };
    match source.next_logits(&req.prefix_ids) {
        Ok(l) => (
            200,
            serde_json::to_string(&LogitsResponse { logits: l.0 }).expect("response serializes"),
        ),
        Err(e) => (500, serde_json::json!({ "error": e.to_string() }).to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::FnSource;

    #[test]
    fn handler_rejects_mismatched_hash() {
        let src = FnSource::new(3, |_| vec![0.0; 3]);
        let (code, _) = handle_logits_request(&src, "abc", Some("def"), r#"{"prefix_ids":[]}"#);
        assert_eq!(code, 409);
    }

    #[test]
    fn handler_answers_with_logits() {
        let src = FnSource::new(3, |p: &[TokenId]| vec![p.len() as f64; 3]);
        let (code, body) = handle_logits_request(&src, "abc", Some("abc"), r#"{"prefix_ids":[1,2]}"#);
        assert_eq!(code, 200);
        let resp: LogitsResponse = serde_json::from_str(&body).unwrap();
        assert_eq!(resp.logits, vec![2.0; 3]);
        let (code, _) = handle_logits_request(&src, "abc", None, "not json");
        assert_eq!(code, 400);
    }
}
