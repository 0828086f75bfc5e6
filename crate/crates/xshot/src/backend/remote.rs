//! HTTP client for remote scoring servers.
//!
//! Protocol (JSON bodies, UTF-8):
//!   GET  /v1/info      -> {"id","vocab_size","context_length"}
//!   POST /v1/tokenize  {"text"} -> {"tokens":[int...]}
//!   POST /v1/score     {"context","continuation"} -> {"tokens":[...],"logprobs":[...]}
//!   POST /v1/generate  {"context","max_new_tokens","stop":[...]} -> {"text"}
//!
//! Transient failures are retried once, then surfaced as hard errors.
//! Log-probabilities are validated on ingestion (natural log, <= 0).

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Deserialize;

use super::{BackendError, GenerationParams, LanguageModel, LmDescriptor, ScoredTokens, TokenId};

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    /// Upper bound on concurrent in-flight requests.
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), max_in_flight: 4, timeout: Duration::from_secs(30) }
    }
}

/// Counting semaphore bounding in-flight requests.
struct InFlight {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(limit: usize) -> Self {
        Self { slots: Mutex::new(limit.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut slots = self.slots.lock().expect("in-flight lock poisoned");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("in-flight lock poisoned");
        }
        *slots -= 1;
        InFlightGuard { sem: self }
    }
}

struct InFlightGuard<'a> {
    sem: &'a InFlight,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.sem.slots.lock().expect("in-flight lock poisoned");
        *slots += 1;
        self.sem.freed.notify_one();
    }
}

pub struct RemoteBackend {
    agent: ureq::Agent,
    base_url: String,
    descriptor: LmDescriptor,
    in_flight: InFlight,
}

#[derive(Deserialize)]
struct InfoResponse {
    id: String,
    vocab_size: usize,
    context_length: usize,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<TokenId>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    tokens: Vec<TokenId>,
    logprobs: Vec<f64>,
}

#[derive(Deserialize)]
struct GenerateResponse {
    text: String,
}

impl RemoteBackend {
    /// Connects and fetches the model descriptor from /v1/info.
    pub fn connect(config: RemoteConfig) -> Result<Self, BackendError> {
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let base_url = config.base_url.trim_end_matches('/').to_string();
        let url = format!("{base_url}/v1/info");
        let info: InfoResponse = with_retry(|| {
            agent
                .get(&url)
                .call()
                .map_err(classify)?
                .into_json()
                .map_err(|e| Transient::No(BackendError::Remote(format!("bad info response: {e}"))))
        })?;
        let descriptor = LmDescriptor::new(info.id, info.vocab_size, info.context_length)?;
        Ok(Self { agent, base_url, descriptor, in_flight: InFlight::new(config.max_in_flight) })
    }

    fn post<T: serde::de::DeserializeOwned>(&self, endpoint: &str, body: serde_json::Value) -> Result<T, BackendError> {
        let _slot = self.in_flight.acquire();
        let url = format!("{}{endpoint}", self.base_url);
        with_retry(|| {
            self.agent
                .post(&url)
                .send_json(body.clone())
                .map_err(classify)?
                .into_json()
                .map_err(|e| Transient::No(BackendError::Remote(format!("bad response from {endpoint}: {e}"))))
        })
    }
}

/// Whether a failed request may be retried.
enum Transient {
    Yes(BackendError),
    No(BackendError),
}

fn classify(err: ureq::Error) -> Transient {
    match err {
        // Transport-level failures and 5xx are worth one retry.
        ureq::Error::Transport(t) => Transient::Yes(BackendError::Remote(t.to_string())),
        ureq::Error::Status(code, resp) if code >= 500 => {
            Transient::Yes(BackendError::Remote(format!("HTTP {code} from {}", resp.get_url())))
        }
        ureq::Error::Status(code, resp) => {
            let url = resp.get_url().to_string();
            let body = resp.into_string().unwrap_or_default();
            Transient::No(BackendError::Remote(format!("HTTP {code} from {url}: {body}")))
        }
    }
}

fn with_retry<T>(mut attempt: impl FnMut() -> Result<T, Transient>) -> Result<T, BackendError> {
    match attempt() {
        Ok(v) => Ok(v),
        Err(Transient::No(e)) => Err(e),
        Err(Transient::Yes(_)) => attempt().map_err(|e| match e {
            Transient::Yes(e) | Transient::No(e) => e,
        }),
    }
}

impl LanguageModel for RemoteBackend {
    fn descriptor(&self) -> LmDescriptor {
        self.descriptor.clone()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let resp: TokenizeResponse = self.post("/v1/tokenize", serde_json::json!({ "text": text }))?;
        Ok(resp.tokens)
    }

    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        self.conditional_score("", text)
    }

    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        let resp: ScoreResponse = self.post(
            "/v1/score",
            serde_json::json!({ "context": context, "continuation": continuation }),
        )?;
        ScoredTokens::new(resp.tokens, resp.logprobs)
    }

    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        let resp: GenerateResponse = self.post(
            "/v1/generate",
            serde_json::json!({
                "context": context,
                "max_new_tokens": params.max_new_tokens,
                "stop": params.stop_sequences,
            }),
        )?;
        Ok(resp.text)
    }
}
