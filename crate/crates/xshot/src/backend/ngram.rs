//! Byte-level n-gram model with add-k smoothing and shortest-context
//! backoff. Counts are exact, so every score can be verified by hand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{
    byte_tokenize, greedy_generate_bytes, score_bytes_from, BackendError, ByteDistribution,
    GenerationParams, LanguageModel, LmDescriptor, ScoredTokens, TokenId, BYTE_VOCAB,
};

/// Trained byte n-gram counts.
///
/// For a context `c` (0 to order-1 preceding bytes) and next byte `b`,
/// `P(b|c) = (count(c·b) + k) / (count(c) + k·256)` where `count(c)` is
/// the number of continuations observed after `c`. Contexts never
/// observed as a continuation point back off to the longest shorter
/// suffix that was.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    add_k: f64,
    // context bytes -> next byte -> continuation count
    counts: BTreeMap<Vec<u8>, BTreeMap<u8, u64>>,
    // context bytes -> total continuations (sum over next bytes)
    totals: BTreeMap<Vec<u8>, u64>,
}

impl NgramModel {
    /// Train on a raw byte corpus, gathering counts for every context
    /// length up to `order - 1`.
    pub fn train(corpus: &[u8], order: usize, add_k: f64) -> Result<Self, BackendError> {
        if order < 1 {
            return Err(BackendError::BadOrder(order));
        }
        if !(add_k > 0.0) {
            return Err(BackendError::BadAddK(add_k));
        }
        if corpus.is_empty() {
            return Err(BackendError::EmptyCorpus);
        }
        let mut counts: BTreeMap<Vec<u8>, BTreeMap<u8, u64>> = BTreeMap::new();
        for i in 0..corpus.len() {
            let max_ctx = (order - 1).min(i);
            for ctx_len in 0..=max_ctx {
                let ctx = corpus[i - ctx_len..i].to_vec();
                *counts.entry(ctx).or_default().entry(corpus[i]).or_insert(0) += 1;
            }
        }
        Ok(Self::from_counts(order, add_k, counts))
    }

    pub fn train_file(path: &Path, order: usize, add_k: f64) -> Result<Self, BackendError> {
        let corpus = std::fs::read(path)?;
        Self::train(&corpus, order, add_k)
    }

    fn from_counts(order: usize, add_k: f64, counts: BTreeMap<Vec<u8>, BTreeMap<u8, u64>>) -> Self {
        let totals = counts
            .iter()
            .map(|(ctx, next)| (ctx.clone(), next.values().sum()))
            .collect();
        Self { order, add_k, counts, totals }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn add_k(&self) -> f64 {
        self.add_k
    }

    /// Probability of `next` after `window`, with backoff to the
    /// longest observed context suffix.
    pub fn prob(&self, window: &[u8], next: u8) -> f64 {
        let mut ctx_len = (self.order - 1).min(window.len());
        let total = loop {
            let ctx = &window[window.len() - ctx_len..];
            match self.totals.get(ctx) {
                Some(t) => break Some((ctx_len, *t)),
                None if ctx_len == 0 => break None,
                None => ctx_len -= 1,
            }
        };
        let (ctx_len, total) = match total {
            Some(pair) => pair,
            // Empty context is always present for a trained model; this
            // arm only serves decoded-from-thin-air models.
            None => (0, 0),
        };
        let ctx = &window[window.len() - ctx_len..];
        let c = self
            .counts
            .get(ctx)
            .and_then(|m| m.get(&next))
            .copied()
            .unwrap_or(0);
        (c as f64 + self.add_k) / (total as f64 + self.add_k * BYTE_VOCAB as f64)
    }

    /// Serialize to the text model format: a header line followed by
    /// lexicographically sorted `<context-hex>\t<byte-hex>\t<count>`
    /// lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "NGRAM v1 order={} addk={} vocab=byte", self.order, self.add_k).unwrap();
        for (ctx, nexts) in &self.counts {
            for (byte, count) in nexts {
                writeln!(out, "{}\t{:02x}\t{}", hex::encode(ctx), byte, count).unwrap();
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parse the text model format, rejecting unsorted or malformed
    /// input so golden files stay bit-exact.
    pub fn from_text(text: &str) -> Result<Self, BackendError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| BackendError::MalformedModel("empty file".into()))?;
        let rest = header
            .strip_prefix("NGRAM v1 ")
            .ok_or_else(|| BackendError::MalformedModel(format!("bad header: {header:?}")))?;
        let mut order: Option<usize> = None;
        let mut add_k: Option<f64> = None;
        let mut vocab_ok = false;
        for part in rest.split_whitespace() {
            if let Some(v) = part.strip_prefix("order=") {
                order = Some(v.parse().map_err(|_| BackendError::MalformedModel(format!("bad order: {v:?}")))?);
            } else if let Some(v) = part.strip_prefix("addk=") {
                add_k = Some(v.parse().map_err(|_| BackendError::MalformedModel(format!("bad addk: {v:?}")))?);
            } else if part == "vocab=byte" {
                vocab_ok = true;
            } else {
                return Err(BackendError::MalformedModel(format!("unknown header field: {part:?}")));
            }
        }
        let order = order.ok_or_else(|| BackendError::MalformedModel("header missing order".into()))?;
        let add_k = add_k.ok_or_else(|| BackendError::MalformedModel("header missing addk".into()))?;
        if !vocab_ok {
            return Err(BackendError::MalformedModel("header missing vocab=byte".into()));
        }
        if order < 1 {
            return Err(BackendError::BadOrder(order));
        }
        if !(add_k > 0.0) {
            return Err(BackendError::BadAddK(add_k));
        }
        let mut counts: BTreeMap<Vec<u8>, BTreeMap<u8, u64>> = BTreeMap::new();
        let mut prev_line: Option<&str> = None;
        for (lineno, line) in lines.enumerate() {
            if let Some(prev) = prev_line {
                if line <= prev {
                    return Err(BackendError::MalformedModel(format!(
                        "line {} not sorted after previous",
                        lineno + 2
                    )));
                }
            }
            prev_line = Some(line);
            let mut fields = line.split('\t');
            let (ctx_hex, byte_hex, count) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), Some(c), None) => (a, b, c),
                _ => {
                    return Err(BackendError::MalformedModel(format!("line {}: expected 3 fields", lineno + 2)))
                }
            };
            let ctx = hex::decode(ctx_hex)
                .map_err(|_| BackendError::MalformedModel(format!("line {}: bad context hex", lineno + 2)))?;
            if ctx.len() > order - 1 {
                return Err(BackendError::MalformedModel(format!(
                    "line {}: context longer than order allows",
                    lineno + 2
                )));
            }
            let byte = hex::decode(byte_hex)
                .ok()
                .filter(|b| b.len() == 1)
                .map(|b| b[0])
                .ok_or_else(|| BackendError::MalformedModel(format!("line {}: bad byte hex", lineno + 2)))?;
            let count: u64 = count
                .parse()
                .map_err(|_| BackendError::MalformedModel(format!("line {}: bad count", lineno + 2)))?;
            counts.entry(ctx).or_default().insert(byte, count);
        }
        if counts.is_empty() {
            return Err(BackendError::MalformedModel("model has no counts".into()));
        }
        Ok(Self::from_counts(order, add_k, counts))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Content digest used to key caches per trained model.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl ByteDistribution for NgramModel {
    fn log_prob(&self, window: &[u8], next: u8) -> f64 {
        self.prob(window, next).ln()
    }
}

/// An [`NgramModel`] behind the backend contract.
pub struct NgramBackend {
    model: NgramModel,
    descriptor: LmDescriptor,
}

impl NgramBackend {
    pub fn new(model: NgramModel, context_length: usize) -> Result<Self, BackendError> {
        let id = format!(
            "ngram-o{}-k{}-{}",
            model.order(),
            model.add_k(),
            &model.digest()[..12]
        );
        let descriptor = LmDescriptor::new(id, BYTE_VOCAB, context_length)?;
        Ok(Self { model, descriptor })
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }
}

impl LanguageModel for NgramBackend {
    fn descriptor(&self) -> LmDescriptor {
        self.descriptor.clone()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        Ok(byte_tokenize(text))
    }

    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        score_bytes_from(&self.model, text.as_bytes(), 0, self.descriptor.context_length)
    }

    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        let mut all = context.as_bytes().to_vec();
        all.extend_from_slice(continuation.as_bytes());
        score_bytes_from(&self.model, &all, context.len(), self.descriptor.context_length)
    }

    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        greedy_generate_bytes(&self.model, context, params, self.descriptor.context_length)
    }
}
