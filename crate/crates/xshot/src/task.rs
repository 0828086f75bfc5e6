//! Task definitions and data ingestion.
//!
//! A task is described by a JSON manifest naming its kind, metric,
//! label space, languages and per-split JSONL files. All text is
//! normalized to Unicode NFC at load so hashing and caching are
//! deterministic. Tasks are immutable after load.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::metrics::MetricKind;

pub const MASK_TOKEN: &str = "[Mask]";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("{file}:{line}: malformed record: {message}")]
    BadRecord { file: String, line: usize, message: String },
    #[error("{file}:{line}: duplicate id {id:?}")]
    DuplicateId { file: String, line: usize, id: String },
    #[error("answer index out of range: {answer} with {choices} choices")]
    AnswerIndexOutOfRange { answer: usize, choices: usize },
    #[error("label {0:?} not in label space")]
    UnknownLabel(String),
    #[error("language {0:?} not declared by the task")]
    UnknownLanguage(String),
    #[error("invalid language code {0:?}")]
    BadLanguageCode(String),
    #[error("split {0:?} does not exist")]
    UnknownSplit(String),
    #[error("no admissible demonstration pool for split {eval_split:?} lang {lang:?}")]
    EmptyPool { eval_split: String, lang: String },
    #[error("down-sampling needs {needed} candidates, example {id:?} has {available}")]
    TooFewCandidates { id: String, needed: usize, available: usize },
    #[error("n_keep must be >= 2, got {0}")]
    BadKeepCount(usize),
    #[error("example {0:?} has no candidate choices")]
    NotChoiceExample(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase two-or-three-letter language tag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: impl Into<String>) -> Result<Self, TaskError> {
        let code = code.into();
        let ok = (2..=3).contains(&code.len())
            && code.bytes().all(|b| b.is_ascii_lowercase() && b.is_ascii_alphabetic());
        if ok {
            Ok(Self(code))
        } else {
            Err(TaskError::BadLanguageCode(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = TaskError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LanguageCode> for String {
    fn from(code: LanguageCode) -> Self {
        code.0
    }
}

impl std::fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Coarse grouping by pre-training data volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceLevel {
    High,
    Medium,
    Low,
    ExtremelyLow,
    #[default]
    Unknown,
}

impl ResourceLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            ResourceLevel::High => "high",
            ResourceLevel::Medium => "medium",
            ResourceLevel::Low => "low",
            ResourceLevel::ExtremelyLow => "extremely-low",
            ResourceLevel::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub code: LanguageCode,
    #[serde(default)]
    pub resource_level: ResourceLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classification,
    MultipleChoice,
    Generation,
    ClozeProbe,
}

/// What the gold annotation of an example is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Classification label, a member of the task's label space.
    Label(String),
    /// Ordered candidate choices with the index of the correct one.
    Choices { choices: Vec<String>, answer: usize },
    /// Reference text for generation tasks.
    Reference(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub lang: LanguageCode,
    pub fields: BTreeMap<String, String>,
    pub payload: Payload,
    pub selector: Option<String>,
}

impl Example {
    /// Candidate surface strings: the label space for classification,
    /// the choices otherwise.
    pub fn gold_label(&self) -> Option<&str> {
        match &self.payload {
            Payload::Label(l) => Some(l),
            _ => None,
        }
    }

    pub fn choices(&self) -> Option<(&[String], usize)> {
        match &self.payload {
            Payload::Choices { choices, answer } => Some((choices, *answer)),
            _ => None,
        }
    }

    pub fn reference(&self) -> Option<&str> {
        match &self.payload {
            Payload::Reference(r) => Some(r),
            _ => None,
        }
    }
}

/// Optional load-time rewrite that replaces a blank marker in one
/// field with the literal mask token (cloze tasks that store the blank
/// inline, e.g. anaphora sentences with an underscore).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRewrite {
    pub field: String,
    #[serde(default = "default_blank")]
    pub from: String,
}

fn default_blank() -> String {
    "_".to_string()
}

#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
    pub metric: MetricKind,
    pub label_space: Vec<String>,
    pub languages: Vec<LanguageInfo>,
    pub splits: BTreeMap<String, Vec<Example>>,
    pub demo_split_policy: Option<String>,
    pub mask_rewrite: Option<MaskRewrite>,
}

#[derive(Deserialize)]
struct ManifestDoc {
    name: String,
    kind: TaskKind,
    metric: MetricKind,
    #[serde(default)]
    label_space: Vec<String>,
    languages: Vec<LanguageInfo>,
    splits: BTreeMap<String, String>,
    #[serde(default)]
    demo_split_policy: Option<String>,
    #[serde(default)]
    mask_rewrite: Option<MaskRewrite>,
}

pub fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Load and validate a task from a manifest referencing per-split
/// JSONL files (paths relative to the manifest).
pub fn load_task(path: &Path) -> Result<Task, TaskError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|_| TaskError::MissingFile(path.display().to_string()))?;
    let doc: ManifestDoc =
        serde_json::from_str(&raw).map_err(|e| TaskError::BadManifest(e.to_string()))?;

    if doc.languages.is_empty() {
        return Err(TaskError::BadManifest("languages must be non-empty".into()));
    }
    match doc.kind {
        TaskKind::Classification if doc.label_space.is_empty() => {
            return Err(TaskError::BadManifest("classification requires a label_space".into()))
        }
        TaskKind::Classification => {}
        _ if !doc.label_space.is_empty() => {
            return Err(TaskError::BadManifest(format!(
                "label_space only applies to classification tasks, kind is {:?}",
                doc.kind
            )))
        }
        _ => {}
    }
    if let MetricKind::PrecisionRecall { positive_label } = &doc.metric {
        if doc.label_space.len() != 2 {
            return Err(TaskError::BadManifest(
                "precision-recall requires a binary label space".into(),
            ));
        }
        if !doc.label_space.contains(positive_label) {
            return Err(TaskError::UnknownLabel(positive_label.clone()).into_manifest());
        }
    }

    let label_space: Vec<String> = doc.label_space.iter().map(|l| nfc(l)).collect();
    let langs: BTreeSet<&str> = doc.languages.iter().map(|l| l.code.as_str()).collect();
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut splits = BTreeMap::new();
    for (split_name, rel) in &doc.splits {
        let split_path = base.join(rel);
        let text = std::fs::read_to_string(&split_path)
            .map_err(|_| TaskError::MissingFile(split_path.display().to_string()))?;
        let file = split_path.display().to_string();
        let mut seen = BTreeSet::new();
        let mut examples = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let example = parse_record(line, &doc, &label_space, &langs, &file, idx + 1)?;
            if !seen.insert(example.id.clone()) {
                return Err(TaskError::DuplicateId { file, line: idx + 1, id: example.id });
            }
            examples.push(example);
        }
        splits.insert(split_name.clone(), examples);
    }

    Ok(Task {
        name: doc.name,
        kind: doc.kind,
        metric: doc.metric,
        label_space,
        languages: doc.languages,
        splits,
        demo_split_policy: doc.demo_split_policy,
        mask_rewrite: doc.mask_rewrite,
    })
}

impl TaskError {
    fn into_manifest(self) -> TaskError {
        TaskError::BadManifest(self.to_string())
    }
}

fn parse_record(
    line: &str,
    doc: &ManifestDoc,
    label_space: &[String],
    langs: &BTreeSet<&str>,
    file: &str,
    lineno: usize,
) -> Result<Example, TaskError> {
    let bad = |message: String| TaskError::BadRecord { file: file.to_string(), line: lineno, message };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| bad(format!("invalid JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| bad("record must be a JSON object".into()))?;

    let get_str = |key: &str| -> Result<String, TaskError> {
        obj.get(key)
            .and_then(|v| v.as_str())
            .map(nfc)
            .ok_or_else(|| bad(format!("missing or non-string {key:?}")))
    };

    let id = get_str("id")?;
    let lang = LanguageCode::new(get_str("lang")?)?;
    if !langs.contains(lang.as_str()) {
        return Err(TaskError::UnknownLanguage(lang.as_str().to_string()));
    }

    let mut fields = BTreeMap::new();
    if let Some(raw_fields) = obj.get("fields") {
        let map = raw_fields.as_object().ok_or_else(|| bad("fields must be an object".into()))?;
        for (k, v) in map {
            let v = v.as_str().ok_or_else(|| bad(format!("field {k:?} must be a string")))?;
            let mut text = nfc(v);
            if let Some(rewrite) = &doc.mask_rewrite {
                if rewrite.field == nfc(k) {
                    text = text.replace(&rewrite.from, MASK_TOKEN);
                }
            }
            fields.insert(nfc(k), text);
        }
    }

    let selector = match obj.get("selector") {
        None => None,
        Some(v) => {
            Some(nfc(v.as_str().ok_or_else(|| bad("selector must be a string".into()))?))
        }
    };

    let payload = match doc.kind {
        TaskKind::Classification => {
            let label = get_str("label")?;
            if !label_space.contains(&label) {
                return Err(TaskError::UnknownLabel(label));
            }
            Payload::Label(label)
        }
        TaskKind::MultipleChoice | TaskKind::ClozeProbe => {
            let choices = obj
                .get("choices")
                .and_then(|v| v.as_array())
                .ok_or_else(|| bad("missing choices array".into()))?
                .iter()
                .map(|c| c.as_str().map(nfc).ok_or_else(|| bad("choices must be strings".into())))
                .collect::<Result<Vec<_>, _>>()?;
            if choices.is_empty() {
                return Err(bad("choices must be non-empty".into()));
            }
            let answer = obj
                .get("answer")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| bad("missing answer index".into()))? as usize;
            if answer >= choices.len() {
                return Err(TaskError::AnswerIndexOutOfRange { answer, choices: choices.len() });
            }
            Payload::Choices { choices, answer }
        }
        TaskKind::Generation => Payload::Reference(get_str("reference")?),
    };

    Ok(Example { id, lang, fields, payload, selector })
}

/// Canonical JSON value of a record: sorted keys, NFC text, compact.
pub fn record_to_value(example: &Example) -> serde_json::Value {
    let mut obj = serde_json::Map::new();
    obj.insert("id".into(), example.id.clone().into());
    obj.insert("lang".into(), example.lang.as_str().into());
    let fields: serde_json::Map<String, serde_json::Value> =
        example.fields.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
    obj.insert("fields".into(), fields.into());
    match &example.payload {
        Payload::Label(label) => {
            obj.insert("label".into(), label.clone().into());
        }
        Payload::Choices { choices, answer } => {
            obj.insert("choices".into(), choices.clone().into());
            obj.insert("answer".into(), (*answer).into());
        }
        Payload::Reference(reference) => {
            obj.insert("reference".into(), reference.clone().into());
        }
    }
    if let Some(selector) = &example.selector {
        obj.insert("selector".into(), selector.clone().into());
    }
    serde_json::Value::Object(obj)
}

/// Re-serialize a split as canonical JSONL.
pub fn split_to_jsonl(task: &Task, split: &str) -> Result<String, TaskError> {
    let examples = task.splits.get(split).ok_or_else(|| TaskError::UnknownSplit(split.to_string()))?;
    let mut out = String::new();
    for example in examples {
        out.push_str(&record_to_value(example).to_string());
        out.push('\n');
    }
    Ok(out)
}

impl Task {
    /// Candidate strings scored against each other for an example: the
    /// label space for classification, the example's choices otherwise.
    pub fn candidates<'a>(&'a self, example: &'a Example) -> Vec<&'a str> {
        match (&self.kind, &example.payload) {
            (TaskKind::Classification, _) => self.label_space.iter().map(String::as_str).collect(),
            (_, Payload::Choices { choices, .. }) => choices.iter().map(String::as_str).collect(),
            _ => Vec::new(),
        }
    }

    /// Index of the gold candidate within `candidates`.
    pub fn gold_index(&self, example: &Example) -> Option<usize> {
        match (&self.kind, &example.payload) {
            (TaskKind::Classification, Payload::Label(label)) => {
                self.label_space.iter().position(|l| l == label)
            }
            (_, Payload::Choices { answer, .. }) => Some(*answer),
            _ => None,
        }
    }

    pub fn split(&self, name: &str) -> Result<&[Example], TaskError> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| TaskError::UnknownSplit(name.to_string()))
    }

    pub fn language_info(&self, code: &LanguageCode) -> Option<&LanguageInfo> {
        self.languages.iter().find(|l| &l.code == code)
    }

    /// Which split supplies demonstrations when evaluating `eval_split`:
    /// an explicit policy override, otherwise the train split, otherwise
    /// dev-for-test / test-for-dev, otherwise the evaluated split itself
    /// (with per-example id exclusion at sampling time).
    pub fn demo_split(&self, eval_split: &str) -> Result<&str, TaskError> {
        if let Some(policy) = &self.demo_split_policy {
            return if self.splits.contains_key(policy) {
                Ok(policy)
            } else {
                Err(TaskError::UnknownSplit(policy.clone()))
            };
        }
        if !self.splits.contains_key(eval_split) {
            return Err(TaskError::UnknownSplit(eval_split.to_string()));
        }
        if self.splits.contains_key("train") {
            return Ok("train");
        }
        if eval_split == "test" && self.splits.contains_key("dev") {
            return Ok("dev");
        }
        if eval_split == "dev" && self.splits.contains_key("test") {
            return Ok("test");
        }
        Ok(self.splits.get_key_value(eval_split).expect("checked above").0)
    }
}

/// Demonstration pool for one language: the policy split filtered to
/// `lang`. The evaluated example's id is excluded at sampling time,
/// not here.
pub fn demo_pool<'t>(
    task: &'t Task,
    eval_split: &str,
    lang: &LanguageCode,
) -> Result<Vec<&'t Example>, TaskError> {
    let split = task.demo_split(eval_split)?;
    let pool: Vec<&Example> =
        task.split(split)?.iter().filter(|e| &e.lang == lang).collect();
    if pool.is_empty() {
        return Err(TaskError::EmptyPool {
            eval_split: eval_split.to_string(),
            lang: lang.as_str().to_string(),
        });
    }
    Ok(pool)
}

/// Restrict a choice example to `n_keep` candidates: the ground truth
/// plus seeded uniform distractors, keeping the original choice order.
pub fn downsample_candidates(
    example: &Example,
    n_keep: usize,
    rng_seed: u64,
) -> Result<Example, TaskError> {
    use rand::seq::index::sample;
    use rand::SeedableRng;

    if n_keep < 2 {
        return Err(TaskError::BadKeepCount(n_keep));
    }
    let (choices, answer) = example
        .choices()
        .ok_or_else(|| TaskError::NotChoiceExample(example.id.clone()))?;
    if choices.len() < n_keep {
        return Err(TaskError::TooFewCandidates {
            id: example.id.clone(),
            needed: n_keep,
            available: choices.len(),
        });
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    // Sample distractors over the choices with the answer removed, then
    // shift indices back around it.
    let distractors = sample(&mut rng, choices.len() - 1, n_keep - 1);
    let mut kept: Vec<usize> = distractors
        .into_iter()
        .map(|i| if i >= answer { i + 1 } else { i })
        .collect();
    kept.push(answer);
    kept.sort_unstable();

    let new_answer = kept.iter().position(|&i| i == answer).expect("answer kept");
    let new_choices = kept.iter().map(|&i| choices[i].clone()).collect();
    Ok(Example {
        payload: Payload::Choices { choices: new_choices, answer: new_answer },
        ..example.clone()
    })
}
