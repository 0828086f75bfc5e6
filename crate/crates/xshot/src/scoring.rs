//! Candidate-scoring functions and the argmax selection rule.
//!
//! Each function turns the per-token log-probabilities of one
//! instantiated prompt per candidate into a single comparable value.
//! Common-prefix/suffix regions are computed on the token sequences of
//! the fully instantiated prompts, since tokenization can merge across
//! the mask boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel, TokenId};
use crate::template::InstantiatedPrompt;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("need at least 2 sequences, got {0}")]
    TooFewSequences(usize),
    #[error("candidate {candidate} has an empty scoring region")]
    EmptyRegion { candidate: usize },
    #[error("candidate {candidate} has an empty mask span")]
    EmptyMask { candidate: usize },
    #[error("candidate {candidate} scored NaN (backend contract violation)")]
    NanScore { candidate: usize },
    #[error("empty score list")]
    EmptyScores,
    #[error("calibration arity mismatch: {raw} raw vs {cf} content-free")]
    ArityMismatch { raw: usize, cf: usize },
    #[error("content-free probability for candidate {candidate} is not positive")]
    ZeroContentFree { candidate: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub const DEFAULT_ANSWER_CONTEXT: &str = "Answer: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringFunction {
    /// Sum of per-token log probabilities of the whole prompt.
    SumLogprob,
    /// That sum divided by the token count.
    MeanLogprob,
    /// Mean over tokens past the common prefix of all candidates'
    /// token sequences.
    MeanSkipCommonPrefix,
    /// Sum over the common-suffix tokens, each conditioned on its own
    /// candidate's full prefix.
    CommonSuffixLogprob,
    /// log P(completion|context) - log P(completion|answer_context),
    /// completion being the mask-span text.
    UncondNormalized { answer_context: String },
    /// Mask-region sum divided by the verbalized candidate's character
    /// count.
    CharNormalized,
}

impl ScoringFunction {
    pub fn uncond_normalized_default() -> Self {
        ScoringFunction::UncondNormalized { answer_context: DEFAULT_ANSWER_CONTEXT.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_index: usize,
    pub value: f64,
    pub token_count: usize,
    pub char_count: usize,
}

/// Length of the longest prefix shared by all sequences.
pub fn common_token_prefix(sequences: &[&[TokenId]]) -> Result<usize, ScoringError> {
    if sequences.len() < 2 {
        return Err(ScoringError::TooFewSequences(sequences.len()));
    }
    let first = sequences[0];
    let mut len = sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    for seq in &sequences[1..] {
        let mut i = 0;
        while i < len && seq[i] == first[i] {
            i += 1;
        }
        len = i;
    }
    Ok(len)
}

/// Length of the longest suffix shared by all sequences.
pub fn common_token_suffix(sequences: &[&[TokenId]]) -> Result<usize, ScoringError> {
    if sequences.len() < 2 {
        return Err(ScoringError::TooFewSequences(sequences.len()));
    }
    let first = sequences[0];
    let mut len = sequences.iter().map(|s| s.len()).min().unwrap_or(0);
    for seq in &sequences[1..] {
        let mut i = 0;
        while i < len && seq[seq.len() - 1 - i] == first[first.len() - 1 - i] {
            i += 1;
        }
        len = i;
    }
    Ok(len)
}

/// Score one instantiated prompt per candidate.
pub fn score_candidates(
    backend: &dyn LanguageModel,
    prompts: &[InstantiatedPrompt],
    function: &ScoringFunction,
) -> Result<Vec<CandidateScore>, ScoringError> {
    if prompts.len() < 2 {
        return Err(ScoringError::TooFewCandidates(prompts.len()));
    }
    match function {
        ScoringFunction::SumLogprob
        | ScoringFunction::MeanLogprob
        | ScoringFunction::MeanSkipCommonPrefix
        | ScoringFunction::CommonSuffixLogprob => full_sequence_scores(backend, prompts, function),
        ScoringFunction::UncondNormalized { answer_context } => {
            mask_region_scores(backend, prompts, Some(answer_context))
        }
        ScoringFunction::CharNormalized => mask_region_scores(backend, prompts, None),
    }
}

fn full_sequence_scores(
    backend: &dyn LanguageModel,
    prompts: &[InstantiatedPrompt],
    function: &ScoringFunction,
) -> Result<Vec<CandidateScore>, ScoringError> {
    let scored: Vec<_> = prompts
        .iter()
        .map(|p| backend.score(&p.text))
        .collect::<Result<_, _>>()?;
    let sequences: Vec<&[TokenId]> = scored.iter().map(|s| s.tokens.as_slice()).collect();

    let region_start = match function {
        ScoringFunction::MeanSkipCommonPrefix => common_token_prefix(&sequences)?,
        _ => 0,
    };
    let suffix_len = match function {
        ScoringFunction::CommonSuffixLogprob => Some(common_token_suffix(&sequences)?),
        _ => None,
    };

    let mut out = Vec::with_capacity(prompts.len());
    for (candidate, (prompt, tokens)) in prompts.iter().zip(&scored).enumerate() {
        let region: &[f64] = match suffix_len {
            Some(s) => {
                if s == 0 {
                    return Err(ScoringError::EmptyRegion { candidate });
                }
                &tokens.logprobs[tokens.len() - s..]
            }
            None => &tokens.logprobs[region_start.min(tokens.len())..],
        };
        if region.is_empty() {
            return Err(ScoringError::EmptyRegion { candidate });
        }
        let sum: f64 = region.iter().sum();
        let value = match function {
            ScoringFunction::SumLogprob | ScoringFunction::CommonSuffixLogprob => sum,
            ScoringFunction::MeanLogprob | ScoringFunction::MeanSkipCommonPrefix => {
                sum / region.len() as f64
            }
            _ => unreachable!("mask-region kinds handled elsewhere"),
        };
        out.push(CandidateScore {
            candidate_index: candidate,
            value,
            token_count: region.len(),
            char_count: prompt.mask_text().chars().count(),
        });
    }
    Ok(out)
}

fn mask_region_scores(
    backend: &dyn LanguageModel,
    prompts: &[InstantiatedPrompt],
    answer_context: Option<&str>,
) -> Result<Vec<CandidateScore>, ScoringError> {
    let mut out = Vec::with_capacity(prompts.len());
    for (candidate, prompt) in prompts.iter().enumerate() {
        let completion = prompt.mask_text();
        let char_count = completion.chars().count();
        if char_count == 0 {
            return Err(ScoringError::EmptyMask { candidate });
        }
        let conditional = backend.conditional_score(prompt.prefix(), completion)?;
        if conditional.is_empty() {
            return Err(ScoringError::EmptyMask { candidate });
        }
        let value = match answer_context {
            Some(answer_context) => {
                let unconditional = backend.conditional_score(answer_context, completion)?;
                conditional.sum() - unconditional.sum()
            }
            None => conditional.sum() / char_count as f64,
        };
        out.push(CandidateScore {
            candidate_index: candidate,
            value,
            token_count: conditional.len(),
            char_count,
        });
    }
    Ok(out)
}

/// Content-free calibration: divide each raw probability by the mean
/// probability the model assigns the candidate on content-free inputs
/// (diagonal reweighting).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    pub enabled: bool,
    pub content_free_inputs: Vec<String>,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            content_free_inputs: vec!["N/A".into(), String::new(), "[MASK]".into()],
        }
    }
}

pub fn calibrate(
    raw: &[f64],
    _spec: &CalibrationSpec,
    cf_scores: &[f64],
) -> Result<Vec<f64>, ScoringError> {
    if raw.len() != cf_scores.len() {
        return Err(ScoringError::ArityMismatch { raw: raw.len(), cf: cf_scores.len() });
    }
    cf_scores
        .iter()
        .zip(raw)
        .enumerate()
        .map(|(candidate, (cf, r))| {
            if *cf > 0.0 {
                Ok(r / cf)
            } else {
                Err(ScoringError::ZeroContentFree { candidate })
            }
        })
        .collect()
}

/// Numerically stable softmax, used to turn candidate scores into the
/// probabilities calibration operates on.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Index of the maximal value; exact ties break to the lowest index.
pub fn select_value(values: &[f64]) -> Result<usize, ScoringError> {
    if values.is_empty() {
        return Err(ScoringError::EmptyScores);
    }
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            return Err(ScoringError::NanScore { candidate: i });
        }
        if *v > values[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn select(scores: &[CandidateScore]) -> Result<usize, ScoringError> {
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    select_value(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{NgramBackend, NgramModel, UniformBackend};
    use crate::task::LanguageCode;

    fn prompt(text: &str, mask: (usize, usize)) -> InstantiatedPrompt {
        InstantiatedPrompt {
            text: text.into(),
            mask_span: mask,
            template_lang: LanguageCode::new("en").unwrap(),
            example_id: "e".into(),
        }
    }

    #[test]
    fn common_prefix_and_suffix_basics() {
        assert_eq!(common_token_prefix(&[&[1, 2, 3], &[1, 2, 4]]).unwrap(), 2);
        assert_eq!(common_token_prefix(&[&[1], &[2]]).unwrap(), 0);
        assert_eq!(common_token_prefix(&[&[1, 2], &[1, 2]]).unwrap(), 2);
        assert!(common_token_prefix(&[&[1, 2]]).is_err());
        assert_eq!(common_token_suffix(&[&[3, 1, 2], &[4, 1, 2]]).unwrap(), 2);
        assert_eq!(common_token_suffix(&[&[1, 2], &[3, 4]]).unwrap(), 0);
        assert_eq!(common_token_suffix(&[&[5, 9], &[7, 9]]).unwrap(), 1);
    }

    #[test]
    fn uniform_sum_prefers_shorter_mean_ties() {
        let backend = UniformBackend::new(64).unwrap();
        let prompts = [prompt("abcde", (0, 5)), prompt("abcdefg", (0, 7))];
        let sums = score_candidates(&backend, &prompts, &ScoringFunction::SumLogprob).unwrap();
        assert!(sums[0].value > sums[1].value);
        assert_eq!(select(&sums).unwrap(), 0);
        let means = score_candidates(&backend, &prompts, &ScoringFunction::MeanLogprob).unwrap();
        assert!((means[0].value - means[1].value).abs() < 1e-12);
        assert_eq!(select(&means).unwrap(), 0, "tie breaks to lowest index");
    }

    #[test]
    fn skip_prefix_equals_mean_when_no_shared_prefix() {
        let model = NgramModel::train(b"xy yz zx repeat xy yz zx", 3, 0.05).unwrap();
        let backend = NgramBackend::new(model, 2048).unwrap();
        let prompts = [prompt("xq tail", (0, 2)), prompt("yq tail", (0, 2))];
        let skip =
            score_candidates(&backend, &prompts, &ScoringFunction::MeanSkipCommonPrefix).unwrap();
        let mean = score_candidates(&backend, &prompts, &ScoringFunction::MeanLogprob).unwrap();
        for (a, b) in skip.iter().zip(&mean) {
            assert!((a.value - b.value).abs() < 1e-12);
            assert_eq!(a.token_count, b.token_count);
        }
    }

    #[test]
    fn skip_prefix_region_matches_brute_force() {
        let model = NgramModel::train(b"A, right? Yes, B. A, right? No, B. ", 3, 0.01).unwrap();
        let backend = NgramBackend::new(model, 2048).unwrap();
        let texts = ["A, right? Yes, B", "A, right? No, B"];
        let prompts = [prompt(texts[0], (10, 13)), prompt(texts[1], (10, 12))];
        let scores =
            score_candidates(&backend, &prompts, &ScoringFunction::MeanSkipCommonPrefix).unwrap();

        // brute force: tokenize both, find first differing byte, average
        // full-sequence logprobs from there
        let a: Vec<u8> = texts[0].bytes().collect();
        let b: Vec<u8> = texts[1].bytes().collect();
        let mut shared = 0;
        while shared < a.len().min(b.len()) && a[shared] == b[shared] {
            shared += 1;
        }
        assert_eq!(shared, 10);
        for (i, text) in texts.iter().enumerate() {
            let full = backend.score(text).unwrap();
            let region = &full.logprobs[shared..];
            let expected = region.iter().sum::<f64>() / region.len() as f64;
            assert!((scores[i].value - expected).abs() < 1e-12);
            assert_eq!(scores[i].token_count, region.len());
        }
    }

    #[test]
    fn identical_candidates_are_an_error() {
        let backend = UniformBackend::new(64).unwrap();
        let prompts = [prompt("same", (0, 4)), prompt("same", (0, 4))];
        let err = score_candidates(&backend, &prompts, &ScoringFunction::MeanSkipCommonPrefix)
            .unwrap_err();
        assert!(matches!(err, ScoringError::EmptyRegion { .. }));
    }

    #[test]
    fn common_suffix_sums_conditioned_on_own_prefix() {
        let model = NgramModel::train(b"the tall one stood. the small one sat. ", 3, 0.01).unwrap();
        let backend = NgramBackend::new(model, 2048).unwrap();
        let texts = ["the tall one", "the small one"];
        let prompts = [prompt(texts[0], (4, 8)), prompt(texts[1], (4, 9))];
        let scores =
            score_candidates(&backend, &prompts, &ScoringFunction::CommonSuffixLogprob).unwrap();
        // shared suffix "all one" = 7 bytes
        for (i, text) in texts.iter().enumerate() {
            let full = backend.score(text).unwrap();
            let expected: f64 = full.logprobs[full.len() - 7..].iter().sum();
            assert_eq!(scores[i].token_count, 7);
            assert!((scores[i].value - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn uncond_normalized_zero_when_context_is_answer_context() {
        let model = NgramModel::train(b"Answer: Yes. Answer: No. ", 3, 0.01).unwrap();
        let backend = NgramBackend::new(model, 2048).unwrap();
        // prompts whose prefix is exactly the answer context
        let prompts = [prompt("Answer: Yes", (8, 11)), prompt("Answer: No", (8, 10))];
        let function = ScoringFunction::uncond_normalized_default();
        let scores = score_candidates(&backend, &prompts, &function).unwrap();
        for s in &scores {
            assert!(s.value.abs() < 1e-12, "score {}", s.value);
        }
    }

    #[test]
    fn uncond_normalized_is_a_difference_of_conditionals() {
        let model = NgramModel::train(b"Q: why? Answer: because. ", 3, 0.02).unwrap();
        let backend = NgramBackend::new(model, 2048).unwrap();
        let prompts = [prompt("Q: why? Answer: because", (16, 23)), prompt("Q: why? Answer: maybe", (16, 21))];
        let function = ScoringFunction::uncond_normalized_default();
        let scores = score_candidates(&backend, &prompts, &function).unwrap();
        for (i, p) in prompts.iter().enumerate() {
            let a = backend.conditional_score(p.prefix(), p.mask_text()).unwrap().sum();
            let b = backend.conditional_score("Answer: ", p.mask_text()).unwrap().sum();
            assert!((scores[i].value - (a - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn char_normalized_divides_by_candidate_chars() {
        let backend = UniformBackend::new(64).unwrap();
        // 3-char and 2-char masks; uniform logprob per byte
        let prompts = [prompt("pre Yes post", (4, 7)), prompt("pre No post", (4, 6))];
        let scores = score_candidates(&backend, &prompts, &ScoringFunction::CharNormalized).unwrap();
        let per_byte = -(256f64).ln();
        assert!((scores[0].value - per_byte * 3.0 / 3.0).abs() < 1e-12);
        assert!((scores[1].value - per_byte * 2.0 / 2.0).abs() < 1e-12);
        assert_eq!(scores[0].char_count, 3);
    }

    #[test]
    fn empty_mask_is_an_error_for_region_kinds() {
        let backend = UniformBackend::new(64).unwrap();
        let prompts = [prompt("no mask here", (3, 3)), prompt("none here", (3, 3))];
        assert!(matches!(
            score_candidates(&backend, &prompts, &ScoringFunction::CharNormalized).unwrap_err(),
            ScoringError::EmptyMask { .. }
        ));
    }

    #[test]
    fn calibrate_divides_and_flips_argmax() {
        let spec = CalibrationSpec { enabled: true, ..Default::default() };
        let adjusted = calibrate(&[0.2, 0.8], &spec, &[0.1, 0.9]).unwrap();
        assert!((adjusted[0] - 2.0).abs() < 1e-12);
        assert!((adjusted[1] - 0.8 / 0.9).abs() < 1e-12);
        assert_eq!(select_value(&adjusted).unwrap(), 0);
        // uniform content-free scores leave the ranking unchanged
        let same = calibrate(&[0.2, 0.8], &spec, &[0.5, 0.5]).unwrap();
        assert_eq!(select_value(&same).unwrap(), 1);
        assert!(matches!(
            calibrate(&[0.5, 0.5], &spec, &[0.0, 1.0]).unwrap_err(),
            ScoringError::ZeroContentFree { candidate: 0 }
        ));
        assert!(calibrate(&[0.5], &spec, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn select_rules() {
        let score = |i, v| CandidateScore { candidate_index: i, value: v, token_count: 1, char_count: 1 };
        assert_eq!(select(&[score(0, -1.0), score(1, -2.0)]).unwrap(), 0);
        assert_eq!(select(&[score(0, -1.0), score(1, -1.0), score(2, -1.0)]).unwrap(), 0);
        assert_eq!(select(&[score(0, -3.0), score(1, -1.0), score(2, -2.0)]).unwrap(), 1);
        assert!(matches!(
            select(&[score(0, f64::NAN)]).unwrap_err(),
            ScoringError::NanScore { candidate: 0 }
        ));
        assert!(matches!(select(&[]).unwrap_err(), ScoringError::EmptyScores));
    }

    #[test]
    fn sum_and_mean_agree_with_equal_lengths_and_no_prefix() {
        let model = NgramModel::train(b"alpha beta gamma delta epsilon", 3, 0.1).unwrap();
        let backend = NgramBackend::new(model, 2048).unwrap();
        let prompts = [prompt("alpha tail", (0, 5)), prompt("gamma tail", (0, 5)), prompt("delta tail", (0, 5))];
        let sums = score_candidates(&backend, &prompts, &ScoringFunction::SumLogprob).unwrap();
        let means = score_candidates(&backend, &prompts, &ScoringFunction::MeanLogprob).unwrap();
        let rank = |scores: &[CandidateScore]| {
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|&a, &b| scores[b].value.partial_cmp(&scores[a].value).unwrap());
            idx
        };
        assert_eq!(rank(&sums), rank(&means));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn monotone_map(a: f64, c: f64, b: f64) -> impl Fn(f64) -> f64 {
            // strictly increasing for a, c > 0
            move |x| a * x + c * x.atan() + b
        }

        proptest! {
            #[test]
            fn argmax_invariant_under_monotone_transforms(
                values in proptest::collection::vec(-1e3f64..0.0, 2..8),
                a in 0.01f64..10.0,
                c in 0.01f64..5.0,
                b in -100.0f64..100.0,
            ) {
                let base = select_value(&values).unwrap();
                let mapped: Vec<f64> = values.iter().map(|&v| monotone_map(a, c, b)(v)).collect();
                prop_assert_eq!(select_value(&mapped).unwrap(), base);
            }

            #[test]
            fn softmax_is_a_distribution(values in proptest::collection::vec(-50.0f64..0.0, 2..6)) {
                let probs = softmax(&values);
                let total: f64 = probs.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(probs.iter().all(|p| *p > 0.0));
            }

            #[test]
            fn prefix_suffix_bounded_by_shortest(
                seqs in proptest::collection::vec(proptest::collection::vec(0u32..4, 1..12), 2..5)
            ) {
                let refs: Vec<&[TokenId]> = seqs.iter().map(|s| s.as_slice()).collect();
                let shortest = seqs.iter().map(|s| s.len()).min().unwrap();
                let p = common_token_prefix(&refs).unwrap();
                let s = common_token_suffix(&refs).unwrap();
                prop_assert!(p <= shortest);
                prop_assert!(s <= shortest);
            }
        }
    }
}
