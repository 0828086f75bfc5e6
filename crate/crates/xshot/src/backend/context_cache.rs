//! Test-double backend that mixes the trained corpus distribution with
//! n-gram counts gathered from the current context window:
//! `P = lambda * P_context + (1 - lambda) * P_corpus`.
//!
//! Because the window counts respond to whatever text precedes the
//! position being scored, demonstrations visibly steer predictions,
//! which makes demonstration effects (such as majority-label bias)
//! reproducible at desk scale. The window term breaks the exact
//! suffix-consistency equivalence the static oracles satisfy.

use std::collections::HashMap;

use super::{
    byte_tokenize, greedy_generate_bytes, score_bytes_from, BackendError, ByteDistribution,
    GenerationParams, LanguageModel, LmDescriptor, NgramModel, ScoredTokens, TokenId, BYTE_VOCAB,
};

pub const DEFAULT_LAMBDA: f64 = 0.5;

pub struct ContextCacheBackend {
    corpus: NgramModel,
    lambda: f64,
    descriptor: LmDescriptor,
}

impl ContextCacheBackend {
    pub fn new(corpus: NgramModel, lambda: f64, context_length: usize) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(BackendError::InvalidParams(format!(
                "lambda must be in [0, 1], got {lambda}"
            )));
        }
        let id = format!(
            "ctxcache-o{}-k{}-l{}-{}",
            corpus.order(),
            corpus.add_k(),
            lambda,
            &corpus.digest()[..12]
        );
        let descriptor = LmDescriptor::new(id, BYTE_VOCAB, context_length)?;
        Ok(Self { corpus, lambda, descriptor })
    }
}

/// Add-k counts over n-grams of the window itself, built incrementally
/// as positions are absorbed. With an empty window the distribution is
/// uniform (all counts zero).
struct WindowCounts<'a> {
    order: usize,
    add_k: f64,
    counts: HashMap<&'a [u8], HashMap<u8, u64>>,
    totals: HashMap<&'a [u8], u64>,
}

impl<'a> WindowCounts<'a> {
    fn new(order: usize, add_k: f64) -> Self {
        Self { order, add_k, counts: HashMap::new(), totals: HashMap::new() }
    }

    /// Account for byte `i` of `buffer` under every context length.
    fn absorb(&mut self, buffer: &'a [u8], i: usize) {
        for ctx_len in 0..=(self.order - 1).min(i) {
            let ctx = &buffer[i - ctx_len..i];
            *self.counts.entry(ctx).or_default().entry(buffer[i]).or_insert(0) += 1;
            *self.totals.entry(ctx).or_insert(0) += 1;
        }
    }

    fn prob(&self, window: &[u8], next: u8) -> f64 {
        let mut ctx_len = (self.order - 1).min(window.len());
        let total = loop {
            let ctx = &window[window.len() - ctx_len..];
            match self.totals.get(ctx) {
                Some(t) => break *t,
                None if ctx_len == 0 => break 0,
                None => ctx_len -= 1,
            }
        };
        let ctx = &window[window.len() - ctx_len..];
        let c = self.counts.get(ctx).and_then(|m| m.get(&next)).copied().unwrap_or(0);
        (c as f64 + self.add_k) / (total as f64 + self.add_k * BYTE_VOCAB as f64)
    }
}

impl ContextCacheBackend {
    fn mixed(&self, cache: &WindowCounts<'_>, window: &[u8], next: u8) -> f64 {
        let p = self.lambda * cache.prob(window, next)
            + (1.0 - self.lambda) * self.corpus.prob(window, next);
        p.ln()
    }
}

impl ByteDistribution for ContextCacheBackend {
    fn log_prob(&self, window: &[u8], next: u8) -> f64 {
        let mut cache = WindowCounts::new(self.corpus.order(), self.corpus.add_k());
        for i in 0..window.len() {
            cache.absorb(window, i);
        }
        self.mixed(&cache, window, next)
    }

    fn next_log_probs(&self, window: &[u8]) -> [f64; BYTE_VOCAB] {
        let mut cache = WindowCounts::new(self.corpus.order(), self.corpus.add_k());
        for i in 0..window.len() {
            cache.absorb(window, i);
        }
        let mut out = [0.0; BYTE_VOCAB];
        for (b, slot) in out.iter_mut().enumerate() {
            *slot = self.mixed(&cache, window, b as u8);
        }
        out
    }

    fn score_span(&self, bytes: &[u8], from: usize) -> Vec<f64> {
        let mut cache = WindowCounts::new(self.corpus.order(), self.corpus.add_k());
        for i in 0..from {
            cache.absorb(bytes, i);
        }
        let mut out = Vec::with_capacity(bytes.len() - from);
        for i in from..bytes.len() {
            out.push(self.mixed(&cache, &bytes[..i], bytes[i]));
            cache.absorb(bytes, i);
        }
        out
    }
}

impl LanguageModel for ContextCacheBackend {
    fn descriptor(&self) -> LmDescriptor {
        self.descriptor.clone()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        Ok(byte_tokenize(text))
    }

    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        score_bytes_from(self, text.as_bytes(), 0, self.descriptor.context_length)
    }

    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        let mut all = context.as_bytes().to_vec();
        all.extend_from_slice(continuation.as_bytes());
        score_bytes_from(self, &all, context.len(), self.descriptor.context_length)
    }

    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        greedy_generate_bytes(self, context, params, self.descriptor.context_length)
    }
}
