//! Uniform scoring/generation surface over language models.
//!
//! Every backend satisfies the same contract: deterministic
//! tokenization, per-token natural-log probabilities, and greedy
//! decoding with stop sequences. The oracle backends (uniform, n-gram,
//! context-cache) operate on raw bytes so every probability can be
//! recomputed by hand; the remote backend speaks a small HTTP protocol
//! and owns its own tokenizer.

mod cache;
mod context_cache;
mod ngram;
mod remote;
mod uniform;

pub use cache::{resolve_cache_dir, CachedBackend, DiskCache, CACHE_DIR_ENV};
pub use context_cache::{ContextCacheBackend, DEFAULT_LAMBDA};
pub use ngram::{NgramBackend, NgramModel};
pub use remote::{RemoteBackend, RemoteConfig};
pub use uniform::UniformBackend;

use thiserror::Error;

pub type TokenId = u32;

/// Byte-level models expose one token per byte.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input of {len} tokens exceeds context length {max}")]
    OverLength { len: usize, max: usize },
    #[error("invalid model descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
    #[error("backend contract violation: {0}")]
    ContractViolation(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be >= 1, got {0}")]
    BadOrder(usize),
    #[error("add-k smoothing constant must be > 0, got {0}")]
    BadAddK(f64),
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("remote protocol error: {0}")]
    Remote(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Identity and size limits of a model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LmDescriptor {
    pub id: String,
    pub vocab_size: usize,
    pub context_length: usize,
}

impl LmDescriptor {
    pub fn new(id: impl Into<String>, vocab_size: usize, context_length: usize) -> Result<Self, BackendError> {
        if vocab_size < 2 {
            return Err(BackendError::InvalidDescriptor(format!(
                "vocab_size must be >= 2, got {vocab_size}"
            )));
        }
        if context_length < 8 {
            return Err(BackendError::InvalidDescriptor(format!(
                "context_length must be >= 8, got {context_length}"
            )));
        }
        Ok(Self { id: id.into(), vocab_size, context_length })
    }
}

/// Token ids with aligned per-token natural-log probabilities.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScoredTokens {
    pub tokens: Vec<TokenId>,
    pub logprobs: Vec<f64>,
}

impl ScoredTokens {
    pub fn new(tokens: Vec<TokenId>, logprobs: Vec<f64>) -> Result<Self, BackendError> {
        if tokens.len() != logprobs.len() {
            return Err(BackendError::ContractViolation(format!(
                "{} tokens but {} logprobs",
                tokens.len(),
                logprobs.len()
            )));
        }
        if let Some(bad) = logprobs.iter().find(|lp| **lp > 0.0 || lp.is_nan()) {
            return Err(BackendError::ContractViolation(format!(
                "logprob {bad} is not a proper conditional (must be <= 0)"
            )));
        }
        Ok(Self { tokens, logprobs })
    }

    pub fn empty() -> Self {
        Self { tokens: Vec::new(), logprobs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub stop_sequences: Vec<String>,
}

impl GenerationParams {
    pub fn new(max_new_tokens: usize, stop_sequences: Vec<String>) -> Result<Self, BackendError> {
        if max_new_tokens < 1 {
            return Err(BackendError::InvalidParams("max_new_tokens must be >= 1".into()));
        }
        Ok(Self { max_new_tokens, stop_sequences })
    }
}

/// The contract every backend satisfies.
///
/// Position 0 of `score` conditions on the empty context. For exactly
/// factorizing backends `conditional_score(a, b)` equals the b-aligned
/// suffix of `score(a + b)`.
pub trait LanguageModel: Send + Sync {
    fn descriptor(&self) -> LmDescriptor;

    /// Deterministic tokenization. Total for byte backends.
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;

    /// Per-token log-probabilities of `text` under the model.
    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError>;

    /// Log-probabilities of the continuation tokens only, each
    /// conditioned on `context` plus the preceding continuation tokens.
    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError>;

    /// Greedy decoding: repeatedly appends the argmax-probability token
    /// (ties resolved to the lowest token id), stopping at the first
    /// emitted stop sequence (stripped from the output) or after
    /// `max_new_tokens`.
    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn descriptor(&self) -> LmDescriptor {
        (**self).descriptor()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).tokenize(text)
    }
    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        (**self).score(text)
    }
    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        (**self).conditional_score(context, continuation)
    }
    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        (**self).greedy_generate(context, params)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn descriptor(&self) -> LmDescriptor {
        (**self).descriptor()
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        (**self).tokenize(text)
    }
    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        (**self).score(text)
    }
    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        (**self).conditional_score(context, continuation)
    }
    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        (**self).greedy_generate(context, params)
    }
}

/// Next-byte distribution shared by the byte-level oracle backends.
pub(crate) trait ByteDistribution {
    /// Natural-log probability of one next byte after the window.
    fn log_prob(&self, window: &[u8], next: u8) -> f64;

    /// Natural-log probabilities over all 256 next bytes given the
    /// preceding bytes of the current request.
    fn next_log_probs(&self, window: &[u8]) -> [f64; BYTE_VOCAB] {
        let mut out = [0.0; BYTE_VOCAB];
        for (b, slot) in out.iter_mut().enumerate() {
            *slot = self.log_prob(window, b as u8);
        }
        out
    }

    /// Per-position log-probabilities for positions `from..` of
    /// `bytes`. Backends with per-request state override this with an
    /// incremental pass.
    fn score_span(&self, bytes: &[u8], from: usize) -> Vec<f64> {
        (from..bytes.len()).map(|i| self.log_prob(&bytes[..i], bytes[i])).collect()
    }
}

pub(crate) fn byte_tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

fn check_len(len: usize, max: usize) -> Result<(), BackendError> {
    if len > max {
        return Err(BackendError::OverLength { len, max });
    }
    Ok(())
}

/// Score positions `from..` of `bytes`, each conditioned on everything
/// before it.
pub(crate) fn score_bytes_from(
    model: &impl ByteDistribution,
    bytes: &[u8],
    from: usize,
    context_length: usize,
) -> Result<ScoredTokens, BackendError> {
    check_len(bytes.len(), context_length)?;
    let tokens = bytes[from..].iter().map(|b| TokenId::from(*b)).collect();
    ScoredTokens::new(tokens, model.score_span(bytes, from))
}

/// Greedy byte decoding shared by the oracle backends.
pub(crate) fn greedy_generate_bytes(
    model: &impl ByteDistribution,
    context: &str,
    params: &GenerationParams,
    context_length: usize,
) -> Result<String, BackendError> {
    if params.max_new_tokens < 1 {
        return Err(BackendError::InvalidParams("max_new_tokens must be >= 1".into()));
    }
    check_len(context.len() + params.max_new_tokens, context_length)?;
    let mut window: Vec<u8> = context.as_bytes().to_vec();
    let mut emitted: Vec<u8> = Vec::new();
    let stops: Vec<&[u8]> = params
        .stop_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.as_bytes())
        .collect();
    for _ in 0..params.max_new_tokens {
        let dist = model.next_log_probs(&window);
        // Ties resolve to the lowest byte value.
        let mut best = 0usize;
        for (b, lp) in dist.iter().enumerate().skip(1) {
            if *lp > dist[best] {
                best = b;
            }
        }
        window.push(best as u8);
        emitted.push(best as u8);
        if let Some(cut) = earliest_stop(&emitted, &stops) {
            emitted.truncate(cut);
            break;
        }
    }
    Ok(String::from_utf8_lossy(&emitted).into_owned())
}

/// Byte offset of the earliest stop-sequence occurrence, if any.
pub(crate) fn earliest_stop(emitted: &[u8], stops: &[&[u8]]) -> Option<usize> {
    let mut cut: Option<usize> = None;
    for stop in stops {
        if stop.is_empty() || stop.len() > emitted.len() {
            continue;
        }
        for start in 0..=emitted.len() - stop.len() {
            if &emitted[start..start + stop.len()] == *stop {
                cut = Some(cut.map_or(start, |c| c.min(start)));
                break;
            }
        }
    }
    cut
}

/// Asserts the oracle invariant that probability mass over all 256
/// next bytes is 1 within 1e-9.
#[cfg(test)]
pub(crate) fn check_vocab_sum(model: &impl ByteDistribution, window: &[u8]) {
    let sum: f64 = model.next_log_probs(window).iter().map(|lp| lp.exp()).sum();
    assert!((sum - 1.0).abs() < 1e-9, "prob mass {sum} for window {window:?}");
}
