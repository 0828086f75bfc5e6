//! Uniform byte model: every next byte has probability 1/256. The
//! simplest oracle for exercising tie-break and random-baseline
//! behavior.

use super::{
    byte_tokenize, greedy_generate_bytes, score_bytes_from, BackendError, ByteDistribution,
    GenerationParams, LanguageModel, LmDescriptor, ScoredTokens, TokenId, BYTE_VOCAB,
};

pub struct UniformBackend {
    descriptor: LmDescriptor,
}

struct UniformDist;

impl ByteDistribution for UniformDist {
    fn log_prob(&self, _window: &[u8], _next: u8) -> f64 {
        -(BYTE_VOCAB as f64).ln()
    }

    fn next_log_probs(&self, _window: &[u8]) -> [f64; BYTE_VOCAB] {
        [-(BYTE_VOCAB as f64).ln(); BYTE_VOCAB]
    }
}

impl UniformBackend {
    pub fn new(context_length: usize) -> Result<Self, BackendError> {
        Ok(Self { descriptor: LmDescriptor::new("uniform-byte", BYTE_VOCAB, context_length)? })
    }
}

impl LanguageModel for UniformBackend {
    fn descriptor(&self) -> LmDescriptor {
        self.descriptor.clone()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        Ok(byte_tokenize(text))
    }

    fn score(&self, text: &str) -> Result<ScoredTokens, BackendError> {
        score_bytes_from(&UniformDist, text.as_bytes(), 0, self.descriptor.context_length)
    }

    fn conditional_score(&self, context: &str, continuation: &str) -> Result<ScoredTokens, BackendError> {
        let mut all = context.as_bytes().to_vec();
        all.extend_from_slice(continuation.as_bytes());
        score_bytes_from(&UniformDist, &all, context.len(), self.descriptor.context_length)
    }

    fn greedy_generate(&self, context: &str, params: &GenerationParams) -> Result<String, BackendError> {
        greedy_generate_bytes(&UniformDist, context, params, self.descriptor.context_length)
    }
}
