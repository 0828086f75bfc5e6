//! Task metrics and cross-run aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{nfc, LanguageCode, ResourceLevel};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction/gold length mismatch: {preds} vs {golds}")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("empty reference at position {0}")]
    EmptyReference(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    PrecisionRecall { positive_label: String },
    #[serde(rename = "precision-at-1")]
    PrecisionAt1,
    CorpusBleu,
}

impl MetricKind {
    /// Name used in reports. BLEU is labeled `bleu-ws` because the
    /// implementation tokenizes on whitespace rather than matching any
    /// external tool.
    pub fn report_names(&self) -> &'static [&'static str] {
        match self {
            MetricKind::Accuracy => &["accuracy"],
            MetricKind::PrecisionRecall { .. } => &["precision", "recall", "accuracy"],
            MetricKind::PrecisionAt1 => &["precision_at_1"],
            MetricKind::CorpusBleu => &["bleu-ws"],
        }
    }
}

/// Fraction of positions where prediction equals gold.
pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64, MetricError> {
    check_aligned(preds.len(), golds.len())?;
    let matches = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(matches as f64 / preds.len() as f64)
}

fn check_aligned(preds: usize, golds: usize) -> Result<(), MetricError> {
    if preds != golds {
        return Err(MetricError::LengthMismatch { preds, golds });
    }
    if preds == 0 {
        return Err(MetricError::EmptyInput);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// False when the respective denominator was zero and the value
    /// was reported as 0 so batch reports complete.
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Standard binary precision/recall against a designated positive
/// label. Zero denominators yield 0 with the corresponding flag unset.
pub fn precision_recall(
    preds: &[&str],
    golds: &[&str],
    positive_label: &str,
) -> Result<PrecisionRecall, MetricError> {
    check_aligned(preds.len(), golds.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in preds.iter().zip(golds) {
        let p_pos = *p == positive_label;
        let g_pos = *g == positive_label;
        match (p_pos, g_pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let (precision, precision_defined) = ratio(tp, tp + fp);
    let (recall, recall_defined) = ratio(tp, tp + fn_);
    Ok(PrecisionRecall { precision, recall, precision_defined, recall_defined })
}

fn ratio(num: usize, denom: usize) -> (f64, bool) {
    if denom == 0 {
        (0.0, false)
    } else {
        (num as f64 / denom as f64, true)
    }
}

/// Macro-average of per-relation accuracy: every relation weighs the
/// same regardless of its size.
pub fn precision_at_1(relations: &[&str], correct: &[bool]) -> Result<f64, MetricError> {
    check_aligned(relations.len(), correct.len())?;
    let mut groups: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (rel, ok) in relations.iter().zip(correct) {
        let entry = groups.entry(rel).or_insert((0, 0));
        entry.1 += 1;
        if *ok {
            entry.0 += 1;
        }
    }
    let sum: f64 = groups.values().map(|(hits, total)| *hits as f64 / *total as f64).sum();
    Ok(sum / groups.len() as f64)
}

fn bleu_tokens(text: &str) -> Vec<String> {
    nfc(text).split_whitespace().map(str::to_string).collect()
}

/// Corpus BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions (1..=max_n) times the brevity penalty
/// `min(1, e^{1 - r/c})`. Whitespace tokenization after NFC, single
/// reference, no smoothing; any zero precision gives 0.
pub fn corpus_bleu(hyps: &[&str], refs: &[&str], max_n: usize) -> Result<f64, MetricError> {
    check_aligned(hyps.len(), refs.len())?;
    let max_n = max_n.max(1);
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (i, (hyp, reference)) in hyps.iter().zip(refs).enumerate() {
        let hyp_tokens = bleu_tokens(hyp);
        let ref_tokens = bleu_tokens(reference);
        if ref_tokens.is_empty() {
            return Err(MetricError::EmptyReference(i));
        }
        hyp_len += hyp_tokens.len();
        ref_len += ref_tokens.len();
        for n in 1..=max_n {
            if hyp_tokens.len() < n {
                continue;
            }
            let hyp_counts = ngram_counts(&hyp_tokens, n);
            let ref_counts = ngram_counts(&ref_tokens, n);
            for (gram, count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += (*count).min(clip);
                totals[n - 1] += count;
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matches[n] == 0 || totals[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp.min(1.0) * (log_sum / max_n as f64).exp())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], u64> {
    let mut counts: BTreeMap<&[String], u64> = BTreeMap::new();
    for window in tokens.windows(n) {
        *counts.entry(window).or_insert(0) += 1;
    }
    counts
}

/// One evaluated example within a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub id: String,
    pub lang: LanguageCode,
    pub gold: String,
    pub predicted: String,
    /// None for generation tasks, where correctness is corpus-level.
    pub correct: Option<bool>,
}

/// Outcome of one (task, lang, k, seed) evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub lang: LanguageCode,
    pub resource_level: ResourceLevel,
    pub k: usize,
    pub run_seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub examples: Vec<ExampleOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Task,
    Lang,
    K,
    ResourceLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub task: Option<String>,
    pub lang: Option<LanguageCode>,
    pub k: Option<usize>,
    pub resource_level: Option<ResourceLevel>,
    pub metric: String,
    pub mean: f64,
    pub sample_std: f64,
    pub n_runs: usize,
}

/// Mean and sample standard deviation per group, sorted by keys.
///
/// When a group spans several languages (grouping without `lang`, e.g.
/// by resource level), per-language means over runs are computed first
/// and the group statistics are taken over those language means, so
/// every language weighs the same.
pub fn aggregate(records: &[RunRecord], grouping: &[GroupKey]) -> Result<Vec<AggregateResult>, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    type Key = (Option<String>, Option<usize>, Option<ResourceLevel>, Option<LanguageCode>, String);
    let mut groups: BTreeMap<Key, Vec<(&RunRecord, f64)>> = BTreeMap::new();
    for record in records {
        for (metric, value) in &record.metrics {
            let key = (
                grouping.contains(&GroupKey::Task).then(|| record.task.clone()),
                grouping.contains(&GroupKey::K).then_some(record.k),
                grouping.contains(&GroupKey::ResourceLevel).then_some(record.resource_level),
                grouping.contains(&GroupKey::Lang).then(|| record.lang.clone()),
                metric.clone(),
            );
            groups.entry(key).or_default().push((record, *value));
        }
    }

    let mut out = Vec::new();
    for ((task, k, resource_level, lang, metric), members) in groups {
        let mut by_lang: BTreeMap<&LanguageCode, Vec<f64>> = BTreeMap::new();
        for (record, value) in &members {
            by_lang.entry(&record.lang).or_default().push(*value);
        }
        let (values, n_runs) = if by_lang.len() == 1 {
            let values: Vec<f64> = members.iter().map(|(_, v)| *v).collect();
            let n = values.len();
            (values, n)
        } else {
            let lang_means: Vec<f64> = by_lang.values().map(|v| mean(v)).collect();
            let n = lang_means.len();
            (lang_means, n)
        };
        out.push(AggregateResult {
            task,
            lang,
            k,
            resource_level,
            metric,
            mean: mean(&values),
            sample_std: sample_std(&values),
            n_runs,
        });
    }
    Ok(out)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}
