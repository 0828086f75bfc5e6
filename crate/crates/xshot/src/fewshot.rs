//! Few-shot context construction: demonstration sampling, separator
//! joining and context-window truncation.
//!
//! The few-shot input for a candidate is
//! `demo_1 [Sep] ... demo_k [Sep] target`, each demonstration being an
//! example instantiated with its gold annotation. With k = 0 the input
//! reduces byte-for-byte to the zero-shot prompt.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel};
use crate::task::{demo_pool, Example, LanguageCode, Task, TaskKind};
use crate::template::{
    instantiate_with_gold, render_generation_query, select_template, InstantiatedPrompt,
    TemplateError, TemplateMode, TemplateSet,
};

#[derive(Debug, Error)]
pub enum FewShotError {
    #[error("pool of {available} examples cannot supply {needed} demonstrations")]
    InsufficientPool { needed: usize, available: usize },
    #[error("class {0:?} absent from the demonstration pool")]
    ClassMissing(String),
    #[error("per-class sampling requires labeled classification examples")]
    NotClassification,
    #[error("separator must be non-empty when k > 0")]
    EmptySeparator,
    #[error("target prompt alone exceeds the context length ({len} > {max})")]
    TargetOverLength { len: usize, max: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Task(#[from] crate::task::TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// k distinct examples uniformly from the whole pool.
    RandomTotal,
    /// Exactly k per class, classes interleaved by one seeded shuffle.
    PerClassUniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSpec {
    pub k: usize,
    pub strategy: SamplingStrategy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparatorSpec {
    pub separator: String,
}

impl Default for SeparatorSpec {
    fn default() -> Self {
        Self { separator: "\n".into() }
    }
}

/// Few-shot transfer setting: demonstrations come from `demo_lang`,
/// templates are chosen by `template_mode`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossLingualSpec {
    pub demo_lang: LanguageCode,
    pub template_mode: TemplateMode,
}

/// Demonstrations that survived truncation, in sampling order.
#[derive(Debug, Clone)]
pub struct FewShotContext {
    pub demos: Vec<InstantiatedPrompt>,
    pub separator: String,
    pub kept_count: usize,
    pub dropped_count: usize,
}

impl FewShotContext {
    pub fn build(&self, target_prompts: &[InstantiatedPrompt]) -> Result<Vec<InstantiatedPrompt>, FewShotError> {
        build_context(&self.demos, target_prompts, &SeparatorSpec { separator: self.separator.clone() })
    }
}

/// Sample demonstrations from a pool, never returning `exclude_id`.
/// Fully deterministic given (seed, pool order).
pub fn sample_demos(
    pool: &[&Example],
    spec: &ShotSpec,
    exclude_id: Option<&str>,
    label_space: Option<&[String]>,
) -> Result<Vec<Example>, FewShotError> {
    if spec.k == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<&Example> =
        pool.iter().filter(|e| Some(e.id.as_str()) != exclude_id).copied().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.strategy {
        SamplingStrategy::RandomTotal => {
            if eligible.len() < spec.k {
                return Err(FewShotError::InsufficientPool {
                    needed: spec.k,
                    available: eligible.len(),
                });
            }
            let picked = rand::seq::index::sample(&mut rng, eligible.len(), spec.k);
            Ok(picked.into_iter().map(|i| eligible[i].clone()).collect())
        }
        SamplingStrategy::PerClassUniform => {
            let labels = label_space.ok_or(FewShotError::NotClassification)?;
            let mut sampled: Vec<&Example> = Vec::with_capacity(spec.k * labels.len());
            for label in labels {
                let members: Vec<&Example> = eligible
                    .iter()
                    .filter(|e| e.gold_label() == Some(label.as_str()))
                    .copied()
                    .collect();
                if members.is_empty() {
                    return Err(FewShotError::ClassMissing(label.clone()));
                }
                if members.len() < spec.k {
                    return Err(FewShotError::InsufficientPool {
                        needed: spec.k,
                        available: members.len(),
                    });
                }
                let picked = rand::seq::index::sample(&mut rng, members.len(), spec.k);
                sampled.extend(picked.into_iter().map(|i| members[i]));
            }
            // Interleave classes so no class systematically ends last.
            sampled.shuffle(&mut rng);
            Ok(sampled.into_iter().cloned().collect())
        }
    }
}

/// Concatenate demonstrations and the target prompt of each candidate:
/// `join(demos, sep) + sep + target`. With no demos the target is
/// returned verbatim (no leading separator).
pub fn build_context(
    demos: &[InstantiatedPrompt],
    target_prompts: &[InstantiatedPrompt],
    sep: &SeparatorSpec,
) -> Result<Vec<InstantiatedPrompt>, FewShotError> {
    if demos.is_empty() {
        return Ok(target_prompts.to_vec());
    }
    if sep.separator.is_empty() {
        return Err(FewShotError::EmptySeparator);
    }
    let mut prefix = String::new();
    for demo in demos {
        prefix.push_str(&demo.text);
        prefix.push_str(&sep.separator);
    }
    Ok(target_prompts.iter().map(|t| t.rebase(&prefix)).collect())
}

/// Drop whole demonstrations from the front (oldest first) until every
/// candidate's full string tokenizes within the context length, minus
/// `reserve_tokens` (generation headroom). Never truncates inside a
/// demonstration or the target.
pub fn truncate_to_fit(
    demos: &[InstantiatedPrompt],
    target_prompts: &[InstantiatedPrompt],
    sep: &SeparatorSpec,
    backend: &dyn LanguageModel,
    reserve_tokens: usize,
) -> Result<FewShotContext, FewShotError> {
    let budget = backend.descriptor().context_length;
    let mut worst_target = 0usize;
    for target in target_prompts {
        worst_target = worst_target.max(backend.tokenize(&target.text)?.len());
    }
    if worst_target + reserve_tokens > budget {
        return Err(FewShotError::TargetOverLength { len: worst_target + reserve_tokens, max: budget });
    }

    let mut start = 0usize;
    while start < demos.len() {
        let candidates = build_context(&demos[start..], target_prompts, sep)?;
        let mut worst = 0usize;
        for candidate in &candidates {
            worst = worst.max(backend.tokenize(&candidate.text)?.len());
        }
        if worst + reserve_tokens <= budget {
            break;
        }
        start += 1;
    }
    Ok(FewShotContext {
        demos: demos[start..].to_vec(),
        separator: sep.separator.clone(),
        kept_count: demos.len() - start,
        dropped_count: start,
    })
}

/// Per-language mean of the largest number of sampled demonstrations
/// that fits the context window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxFitRow {
    pub task: String,
    pub lang: LanguageCode,
    pub mean_fit: f64,
    pub n_examples: usize,
}

pub fn max_fit_rows_to_csv(rows: &[MaxFitRow]) -> String {
    let mut out = String::from("task,lang,mean_fit,n_examples\n");
    for row in rows {
        out.push_str(&format!("{},{},{},{}\n", row.task, row.lang, row.mean_fit, row.n_examples));
    }
    out
}

/// For each evaluated example, the largest k such that the first k
/// demonstrations of one seeded pool permutation fit together with the
/// example's worst-case candidate; averaged per language.
pub fn max_fit_stats(
    task: &Task,
    templates: &TemplateSet,
    mode: &TemplateMode,
    backend: &dyn LanguageModel,
    sep: &SeparatorSpec,
    eval_split: &str,
    seed: u64,
    reserve_tokens: usize,
) -> Result<Vec<MaxFitRow>, FewShotError> {
    let mut rows = Vec::new();
    for lang_info in &task.languages {
        let lang = &lang_info.code;
        let examples: Vec<&Example> =
            task.split(eval_split)?.iter().filter(|e| &e.lang == lang).collect();
        if examples.is_empty() {
            continue;
        }
        let pool = demo_pool(task, eval_split, lang).unwrap_or_default();
        let permutation = sample_demos(
            &pool,
            &ShotSpec { k: pool.len(), strategy: SamplingStrategy::RandomTotal, seed },
            None,
            None,
        )?;
        let template = select_template(mode, templates, lang)?;
        let demo_prompts: Vec<(String, InstantiatedPrompt)> = permutation
            .iter()
            .map(|d| instantiate_with_gold(template, d).map(|p| (d.id.clone(), p)))
            .collect::<Result<_, _>>()?;

        let mut total_fit = 0usize;
        for example in &examples {
            let targets = target_prompts_for(task, templates, mode, example)?;
            let demos: Vec<InstantiatedPrompt> = demo_prompts
                .iter()
                .filter(|(id, _)| id != &example.id)
                .map(|(_, p)| p.clone())
                .collect();
            total_fit += largest_fit(&demos, &targets, sep, backend, reserve_tokens)?;
        }
        rows.push(MaxFitRow {
            task: task.name.clone(),
            lang: lang.clone(),
            mean_fit: total_fit as f64 / examples.len() as f64,
            n_examples: examples.len(),
        });
    }
    Ok(rows)
}

/// One instantiated prompt per candidate, or the generation query for
/// generation tasks.
pub fn target_prompts_for(
    task: &Task,
    templates: &TemplateSet,
    mode: &TemplateMode,
    example: &Example,
) -> Result<Vec<InstantiatedPrompt>, FewShotError> {
    let template = select_template(mode, templates, &example.lang)?;
    if task.kind == TaskKind::Generation {
        let prefix = render_generation_query(template, example)?;
        let span = prefix.chars().count();
        return Ok(vec![InstantiatedPrompt {
            text: prefix,
            mask_span: (span, span),
            template_lang: template.lang.clone(),
            example_id: example.id.clone(),
        }]);
    }
    task.candidates(example)
        .iter()
        .map(|candidate| {
            crate::template::instantiate(template, example, candidate, template.verbalizer())
                .map_err(FewShotError::from)
        })
        .collect()
}

/// Largest k (prefix of `demos`) whose joined string fits for every
/// candidate. Returns 0 when even the bare target overflows.
fn largest_fit(
    demos: &[InstantiatedPrompt],
    targets: &[InstantiatedPrompt],
    sep: &SeparatorSpec,
    backend: &dyn LanguageModel,
    reserve_tokens: usize,
) -> Result<usize, FewShotError> {
    let budget = backend.descriptor().context_length;
    let fits = |k: usize| -> Result<bool, FewShotError> {
        let candidates = build_context(&demos[..k], targets, sep)?;
        for candidate in &candidates {
            if backend.tokenize(&candidate.text)?.len() + reserve_tokens > budget {
                return Ok(false);
            }
        }
        Ok(true)
    };
    if !fits(0)? {
        return Ok(0);
    }
    let (mut lo, mut hi) = (0usize, demos.len());
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(lo)
}
