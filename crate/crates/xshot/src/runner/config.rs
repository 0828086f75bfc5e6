//! Evaluation configuration: a JSON document mirroring the CLI flags.
//! Flags override config fields; the merged value drives the run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::fewshot::{SamplingStrategy, SeparatorSpec};
use crate::scoring::{CalibrationSpec, ScoringFunction};
use crate::task::LanguageCode;
use crate::template::TemplateMode;

/// Which model serves the run. String forms: `uniform`, `ngram:PATH`,
/// `remote:URL`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Uniform,
    Ngram(PathBuf),
    Remote(String),
}

impl TryFrom<String> for BackendSpec {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        if value == "uniform" {
            Ok(BackendSpec::Uniform)
        } else if let Some(path) = value.strip_prefix("ngram:") {
            Ok(BackendSpec::Ngram(PathBuf::from(path)))
        } else if let Some(url) = value.strip_prefix("remote:") {
            Ok(BackendSpec::Remote(url.to_string()))
        } else {
            Err(format!("unknown backend {value:?}; expected uniform | ngram:PATH | remote:URL"))
        }
    }
}

impl From<BackendSpec> for String {
    fn from(spec: BackendSpec) -> Self {
        match spec {
            BackendSpec::Uniform => "uniform".into(),
            BackendSpec::Ngram(path) => format!("ngram:{}", path.display()),
            BackendSpec::Remote(url) => format!("remote:{url}"),
        }
    }
}

fn default_scoring() -> ScoringFunction {
    ScoringFunction::MeanSkipCommonPrefix
}

fn default_shots() -> Vec<usize> {
    vec![0, 4]
}

fn default_runs() -> usize {
    5
}

fn default_strategy() -> SamplingStrategy {
    SamplingStrategy::RandomTotal
}

fn default_mode() -> TemplateMode {
    TemplateMode::SameLanguage
}

fn default_max_new_tokens() -> usize {
    64
}

fn default_stops() -> Vec<String> {
    vec!["\n".into()]
}

fn default_context_length() -> usize {
    2048
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Task manifest path.
    pub task: PathBuf,
    /// Template descriptor files, one per (task, language).
    pub templates: Vec<PathBuf>,
    pub backend: BackendSpec,
    /// Context length for the oracle backends. Remote backends report
    /// their own.
    #[serde(default = "default_context_length")]
    pub context_length: usize,
    /// Default sigma: averaged per-token log-probabilities ignoring the
    /// candidates' common prefix, with no calibration.
    #[serde(default = "default_scoring")]
    pub scoring: ScoringFunction,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub separator: SeparatorSpec,
    #[serde(default = "default_strategy")]
    pub strategy: SamplingStrategy,
    #[serde(default = "default_mode")]
    pub template_mode: TemplateMode,
    /// Cross-lingual demonstrations: sample the pool from this language
    /// instead of the evaluated one.
    #[serde(default)]
    pub demo_lang: Option<LanguageCode>,
    /// Defaults to "test" when present, then "dev", then the only split.
    #[serde(default)]
    pub eval_split: Option<String>,
    /// Subset of task languages to evaluate; all when absent.
    #[serde(default)]
    pub langs: Option<Vec<LanguageCode>>,
    /// Translate-test baseline: translator endpoint URL.
    #[serde(default)]
    pub translate_test: Option<String>,
    #[serde(default)]
    pub translate_target: Option<LanguageCode>,
    /// Down-sample choice candidates to this many (knowledge probing).
    #[serde(default)]
    pub probe_candidates: Option<usize>,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default = "default_stops")]
    pub stop_sequences: Vec<String>,
    /// Defaults to `<out_dir>/cache`; the XSHOT_CACHE_DIR environment
    /// variable overrides both.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Re-sample demonstrations per example instead of sharing one set
    /// per run.
    #[serde(default)]
    pub per_example_resample: bool,
    /// Also write every composed prompt to prompts.jsonl for audits.
    #[serde(default)]
    pub dump_prompts: bool,
}

impl EvalConfig {
    pub fn from_json(json: &str) -> Result<Self, String> {
        serde_json::from_str(json).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.shots.is_empty() {
            return Err("shot list must be non-empty".into());
        }
        if self.n_runs < 1 {
            return Err("n_runs must be >= 1".into());
        }
        if self.templates.is_empty() {
            return Err("at least one template file is required".into());
        }
        if self.separator.separator.is_empty() && self.shots.iter().any(|&k| k > 0) {
            return Err("separator must be non-empty for few-shot settings".into());
        }
        if self.calibration.enabled && self.calibration.content_free_inputs.is_empty() {
            return Err("calibration requires content-free inputs".into());
        }
        if let Some(n) = self.probe_candidates {
            if n < 2 {
                return Err("probe_candidates must be >= 2".into());
            }
        }
        Ok(())
    }
}
