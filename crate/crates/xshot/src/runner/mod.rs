//! Evaluation orchestration: seeds and repeats, cross-lingual
//! settings, translate-test preprocessing, persistence and reporting.
//!
//! Determinism contract: (config, seed, backend artifact) fully
//! determine every output byte. Rows are sorted before writing and no
//! output contains wall-clock state. Failures abort only their own
//! (lang, k, run) cell and are recorded as first-class rows.

mod config;
mod report;
mod translate;

pub use config::{BackendSpec, EvalConfig};
pub use report::{
    compute_run_records, read_records, render_report_files, render_tables, FailureRow, RecordLine,
    RecordsMeta, ResultRow,
};
pub use translate::TranslatorClient;

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{
    resolve_cache_dir, BackendError, CachedBackend, GenerationParams, LanguageModel, NgramBackend,
    NgramModel, RemoteBackend, RemoteConfig, UniformBackend,
};
use crate::fewshot::{
    build_context, sample_demos, target_prompts_for, truncate_to_fit, FewShotError, ShotSpec,
    SamplingStrategy,
};
use crate::metrics::{GroupKey, MetricError, RunRecord};
use crate::scoring::{calibrate, score_candidates, select, select_value, softmax, ScoringError};
use crate::task::{
    demo_pool, downsample_candidates, load_task, Example, LanguageCode, Task, TaskError, TaskKind,
};
use crate::template::{
    instantiate_with_gold, select_template, InstantiatedPrompt, TemplateError, TemplateSet,
};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("translation error: {0}")]
    Translate(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct EvalOutcome {
    pub records_path: PathBuf,
    pub report_csv: Option<PathBuf>,
    pub report_txt: Option<PathBuf>,
    pub run_records: Vec<RunRecord>,
    pub failures: Vec<FailureRow>,
    /// Requests that reached the wrapped backend (cache misses).
    pub backend_inner_calls: u64,
    /// Requests that reached the translator endpoint.
    pub translator_calls: u64,
}

/// Every composed prompt of one evaluated example, for audits.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PromptDump {
    pub lang: LanguageCode,
    pub k: usize,
    pub run_seed: u64,
    pub example_id: String,
    pub texts: Vec<String>,
    pub prompt_digest: String,
}

/// Derive an independent seed stream from a base seed and a stable
/// string key (example id), so per-example draws do not perturb the
/// shared run stream.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields at least 8 bytes"))
}

fn prompt_digest(texts: &[&str]) -> String {
    let value = serde_json::json!(texts);
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn build_backend(
    config: &EvalConfig,
    cache_dir: &Path,
) -> Result<CachedBackend<Box<dyn LanguageModel>>, RunnerError> {
    let inner: Box<dyn LanguageModel> = match &config.backend {
        BackendSpec::Uniform => Box::new(UniformBackend::new(config.context_length)?),
        BackendSpec::Ngram(path) => {
            let model = NgramModel::load(path)?;
            Box::new(NgramBackend::new(model, config.context_length)?)
        }
        BackendSpec::Remote(url) => Box::new(RemoteBackend::connect(RemoteConfig::new(url))?),
    };
    Ok(CachedBackend::wrap(inner, cache_dir)?)
}

fn resolve_eval_split<'t>(task: &'t Task, config: &EvalConfig) -> Result<&'t str, RunnerError> {
    if let Some(split) = &config.eval_split {
        return task
            .splits
            .get_key_value(split.as_str())
            .map(|(k, _)| k.as_str())
            .ok_or_else(|| RunnerError::Config(format!("eval split {split:?} does not exist")));
    }
    for preferred in ["test", "dev"] {
        if task.splits.contains_key(preferred) {
            return Ok(task.splits.get_key_value(preferred).expect("checked").0);
        }
    }
    if task.splits.len() == 1 {
        return Ok(task.splits.keys().next().expect("non-empty").as_str());
    }
    Err(RunnerError::Config(
        "cannot infer eval split: no test or dev split; set eval_split".into(),
    ))
}

struct CellSetup<'a> {
    task: &'a Task,
    templates: &'a TemplateSet,
    backend: &'a dyn LanguageModel,
    config: &'a EvalConfig,
    translator: Option<&'a TranslatorClient>,
    eval_split: &'a str,
}

pub fn run_eval(config: &EvalConfig) -> Result<EvalOutcome, RunnerError> {
    config.validate().map_err(RunnerError::Config)?;
    std::fs::create_dir_all(&config.out_dir)?;

    let task = load_task(&config.task)?;
    let templates = TemplateSet::load_files(&config.templates)?;
    if task.kind == TaskKind::Classification {
        for lang in templates.languages() {
            templates.get(lang)?.verbalizer().validate(&task.label_space)?;
        }
    }
    if config.strategy == SamplingStrategy::PerClassUniform && task.kind != TaskKind::Classification
    {
        return Err(RunnerError::Config(
            "per-class-uniform sampling requires a classification task".into(),
        ));
    }
    if let crate::template::TemplateMode::SourceLanguage(source) = &config.template_mode {
        templates.get(source)?;
    }

    let default_cache = config.out_dir.join("cache");
    let cache_dir = resolve_cache_dir(config.cache_dir.as_deref().unwrap_or(&default_cache));
    let backend = build_backend(config, &cache_dir)?;

    let translator = match &config.translate_test {
        None => None,
        Some(url) => {
            let target = config
                .translate_target
                .clone()
                .unwrap_or_else(|| LanguageCode::new("en").expect("valid code"));
            Some(TranslatorClient::new(url, target).with_cache(&cache_dir)?)
        }
    };

    let eval_split = resolve_eval_split(&task, config)?.to_string();
    let langs: Vec<LanguageCode> = match &config.langs {
        None => task.languages.iter().map(|l| l.code.clone()).collect(),
        Some(requested) => {
            for lang in requested {
                if task.language_info(lang).is_none() {
                    return Err(RunnerError::Config(format!(
                        "language {lang} not declared by the task"
                    )));
                }
            }
            requested.clone()
        }
    };

    let mut notes: Vec<String> = Vec::new();
    if translator.is_some() {
        notes.push(
            "translate-test translates every example entering the pipeline, demonstrations included"
                .into(),
        );
    }
    if config.shots.iter().any(|&k| k > 0) {
        notes.push(if config.per_example_resample {
            "demonstrations re-sampled per example".into()
        } else {
            "demonstrations shared per run, re-drawn per example only on id collision".into()
        });
    }

    let setup = CellSetup {
        task: &task,
        templates: &templates,
        backend: &backend,
        config,
        translator: translator.as_ref(),
        eval_split: &eval_split,
    };

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut failures: Vec<FailureRow> = Vec::new();
    let mut dumps: Vec<PromptDump> = Vec::new();
    for lang in &langs {
        for &k in &config.shots {
            let runs = if k == 0 { 1 } else { config.n_runs };
            for run in 0..runs {
                let seed = config.base_seed + run as u64;
                match evaluate_cell(&setup, lang, k, seed) {
                    Ok((mut cell_rows, mut cell_dumps)) => {
                        rows.append(&mut cell_rows);
                        dumps.append(&mut cell_dumps);
                    }
                    Err(e) => failures.push(FailureRow {
                        task: task.name.clone(),
                        lang: lang.clone(),
                        k,
                        run_seed: seed,
                        error: e.to_string(),
                    }),
                }
            }
        }
    }

    let meta = RecordsMeta {
        task: task.name.clone(),
        kind: task.kind,
        metric: task.metric.clone(),
        languages: task.languages.clone(),
        eval_split: eval_split.clone(),
        shots: config.shots.clone(),
        n_runs: config.n_runs,
        backend_id: backend.descriptor().id,
        scoring: config.scoring.clone(),
        notes: notes.clone(),
    };

    let records_path = config.out_dir.join("records.jsonl");
    report::write_records(&records_path, &meta, &rows, &failures)?;

    let manifest = serde_json::json!({
        "config": config,
        "backend_id": meta.backend_id,
        "notes": notes,
    });
    std::fs::write(
        config.out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;

    if config.dump_prompts {
        dumps.sort_by(|a, b| {
            (a.lang.as_str(), a.k, a.run_seed, &a.example_id)
                .cmp(&(b.lang.as_str(), b.k, b.run_seed, &b.example_id))
        });
        let mut out = String::new();
        for dump in &dumps {
            out.push_str(&serde_json::to_string(dump)?);
            out.push('\n');
        }
        std::fs::write(config.out_dir.join("prompts.jsonl"), out)?;
    }

    let (run_records, report_csv, report_txt) = if rows.is_empty() {
        (Vec::new(), None, None)
    } else {
        let records = compute_run_records(&meta, &rows)?;
        let (csv, txt) = render_report_files(
            &records_path,
            &config.out_dir,
            &[GroupKey::Task, GroupKey::Lang, GroupKey::K, GroupKey::ResourceLevel],
        )?;
        (records, Some(csv), Some(txt))
    };

    Ok(EvalOutcome {
        records_path,
        report_csv,
        report_txt,
        run_records,
        failures,
        backend_inner_calls: backend.inner_calls(),
        translator_calls: translator.as_ref().map_or(0, |t| t.calls()),
    })
}

fn evaluate_cell(
    setup: &CellSetup<'_>,
    lang: &LanguageCode,
    k: usize,
    seed: u64,
) -> Result<(Vec<ResultRow>, Vec<PromptDump>), RunnerError> {
    let CellSetup { task, templates, backend, config, translator, eval_split } = setup;
    let originals: Vec<&Example> =
        task.split(eval_split)?.iter().filter(|e| &e.lang == lang).collect();
    if originals.is_empty() {
        return Err(RunnerError::Config(format!(
            "no {lang} examples in split {eval_split:?}"
        )));
    }
    let eval_examples: Vec<Example> = match translator {
        Some(t) => t.transform_examples(&originals)?,
        None => originals.iter().map(|e| (*e).clone()).collect(),
    };

    // Demonstration machinery. The pool comes from the demo language
    // (cross-lingual transfer draws it from a source language), shared
    // across examples within the run.
    let label_space_opt =
        (task.kind == TaskKind::Classification).then(|| task.label_space.clone());
    let mut pool_owned: Vec<Example> = Vec::new();
    let mut shared_demos: Vec<Example> = Vec::new();
    if k > 0 {
        let pool_lang = config.demo_lang.as_ref().unwrap_or(lang);
        let pool_refs = demo_pool(task, eval_split, pool_lang)?;
        pool_owned = match translator {
            Some(t) => t.transform_examples(&pool_refs)?,
            None => pool_refs.into_iter().cloned().collect(),
        };
        let refs: Vec<&Example> = pool_owned.iter().collect();
        shared_demos = sample_demos(
            &refs,
            &ShotSpec { k, strategy: config.strategy, seed },
            None,
            label_space_opt.as_deref(),
        )?;
    }
    let shared_demo_prompts = demo_prompts_for(setup, &shared_demos)?;

    let generation = task.kind == TaskKind::Generation;
    let params = if generation {
        Some(
            GenerationParams::new(config.max_new_tokens, config.stop_sequences.clone())
                .map_err(RunnerError::Backend)?,
        )
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut dumps = Vec::new();
    for example in &eval_examples {
        let mut working = example.clone();
        if let Some(n_keep) = config.probe_candidates {
            working = downsample_candidates(&working, n_keep, derive_seed(config.base_seed, &working.id))?;
        }

        // Shared demos, unless this example collides with one (or the
        // config asks for per-example resampling): then a fresh draw
        // from an independent per-example stream, with the id excluded.
        let collision = shared_demos.iter().any(|d| d.id == working.id);
        let demo_prompts: &[InstantiatedPrompt];
        let fresh_prompts: Vec<InstantiatedPrompt>;
        if k > 0 && (config.per_example_resample || collision) {
            let refs: Vec<&Example> = pool_owned.iter().collect();
            let fresh = sample_demos(
                &refs,
                &ShotSpec { k, strategy: config.strategy, seed: derive_seed(seed, &working.id) },
                Some(&working.id),
                label_space_opt.as_deref(),
            )?;
            fresh_prompts = demo_prompts_for(setup, &fresh)?;
            demo_prompts = &fresh_prompts;
        } else {
            demo_prompts = &shared_demo_prompts;
        }

        let targets = target_prompts_for(task, templates, &config.template_mode, &working)?;
        let reserve = if generation { config.max_new_tokens } else { 0 };
        let ctx = truncate_to_fit(demo_prompts, &targets, &config.separator, *backend, reserve)?;
        let finals = ctx.build(&targets)?;
        let texts: Vec<&str> = finals.iter().map(|f| f.text.as_str()).collect();
        let digest = prompt_digest(&texts);

        let row = if generation {
            let prediction = backend
                .greedy_generate(&finals[0].text, params.as_ref().expect("set for generation"))?;
            let gold = working.reference().unwrap_or_default().to_string();
            ResultRow {
                task: task.name.clone(),
                lang: lang.clone(),
                k,
                run_seed: seed,
                example_id: working.id.clone(),
                correct: Some(prediction == gold),
                prediction,
                gold,
                candidate_scores: Vec::new(),
                kept_demos: ctx.kept_count,
                dropped_demos: ctx.dropped_count,
                prompt_digest: digest.clone(),
                relation: working.fields.get("relation").cloned(),
            }
        } else {
            let scores = score_candidates(*backend, &finals, &config.scoring)?;
            let predicted_index = if config.calibration.enabled {
                let raw = softmax(&scores.iter().map(|s| s.value).collect::<Vec<_>>());
                let cf_mean = content_free_probabilities(setup, &working, &ctx)?;
                let adjusted = calibrate(&raw, &config.calibration, &cf_mean)?;
                select_value(&adjusted)?
            } else {
                select(&scores)?
            };
            let candidates = task.candidates(&working);
            let gold_index = task.gold_index(&working).ok_or_else(|| {
                RunnerError::Config(format!("example {:?} has no gold annotation", working.id))
            })?;
            ResultRow {
                task: task.name.clone(),
                lang: lang.clone(),
                k,
                run_seed: seed,
                example_id: working.id.clone(),
                prediction: candidates[predicted_index].to_string(),
                gold: candidates[gold_index].to_string(),
                correct: Some(predicted_index == gold_index),
                candidate_scores: scores.iter().map(|s| s.value).collect(),
                kept_demos: ctx.kept_count,
                dropped_demos: ctx.dropped_count,
                prompt_digest: digest.clone(),
                relation: working.fields.get("relation").cloned(),
            }
        };
        rows.push(row);
        dumps.push(PromptDump {
            lang: lang.clone(),
            k,
            run_seed: seed,
            example_id: working.id.clone(),
            texts: texts.iter().map(|t| t.to_string()).collect(),
            prompt_digest: digest,
        });
    }
    Ok((rows, dumps))
}

fn demo_prompts_for(
    setup: &CellSetup<'_>,
    demos: &[Example],
) -> Result<Vec<InstantiatedPrompt>, RunnerError> {
    demos
        .iter()
        .map(|demo| {
            let template =
                select_template(&setup.config.template_mode, setup.templates, &demo.lang)?;
            instantiate_with_gold(template, demo).map_err(RunnerError::from)
        })
        .collect()
}

/// Per-candidate probabilities on content-free inputs, averaged over
/// the configured inputs. Every field of the example is replaced by
/// the content-free string; demonstrations and truncation mirror the
/// real context.
fn content_free_probabilities(
    setup: &CellSetup<'_>,
    example: &Example,
    ctx: &crate::fewshot::FewShotContext,
) -> Result<Vec<f64>, RunnerError> {
    let CellSetup { task, templates, backend, config, .. } = setup;
    let inputs = &config.calibration.content_free_inputs;
    let mut sums: Vec<f64> = Vec::new();
    for content_free in inputs {
        let mut cf_example = example.clone();
        for (_, value) in cf_example.fields.iter_mut() {
            *value = content_free.clone();
        }
        let cf_targets = target_prompts_for(task, templates, &config.template_mode, &cf_example)?;
        let cf_finals = build_context(&ctx.demos, &cf_targets, &crate::fewshot::SeparatorSpec {
            separator: ctx.separator.clone(),
        })?;
        let cf_scores = score_candidates(*backend, &cf_finals, &config.scoring)?;
        let probs = softmax(&cf_scores.iter().map(|s| s.value).collect::<Vec<_>>());
        if sums.is_empty() {
            sums = probs;
        } else {
            for (total, p) in sums.iter_mut().zip(&probs) {
                *total += p;
            }
        }
    }
    Ok(sums.iter().map(|s| s / inputs.len() as f64).collect())
}
