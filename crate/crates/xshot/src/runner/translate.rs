//! Translate-test preprocessing: machine-translate example fields into
//! a pivot language and evaluate with that language's setup.
//!
//! Protocol: POST {base}/v1/translate {"text","source","target"} ->
//! {"text"}. Responses go through the standard disk cache; one retry
//! on transient failure.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use crate::backend::DiskCache;
use crate::task::{Example, LanguageCode};

use super::RunnerError;

pub struct TranslatorClient {
    agent: ureq::Agent,
    base_url: String,
    pub target_lang: LanguageCode,
    cache: Option<DiskCache>,
    calls: AtomicU64,
}

impl TranslatorClient {
    pub fn new(base_url: &str, target_lang: LanguageCode) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
            base_url: base_url.trim_end_matches('/').to_string(),
            target_lang,
            cache: None,
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, dir: &Path) -> Result<Self, RunnerError> {
        self.cache = Some(DiskCache::open(dir)?);
        Ok(self)
    }

    /// Requests that actually reached the endpoint (cache misses).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn translate(&self, text: &str, source: &str, example_id: &str) -> Result<String, RunnerError> {
        let request = serde_json::json!({
            "text": text,
            "source": source,
            "target": self.target_lang.as_str(),
        });
        let backend_id = format!("translator:{}", self.base_url);
        let fetch = || -> Result<String, RunnerError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let url = format!("{}/v1/translate", self.base_url);
            let send = || self.agent.post(&url).send_json(request.clone());
            let response = match send() {
                Ok(r) => r,
                // one retry on transport-level failure
                Err(ureq::Error::Transport(_)) => send().map_err(|e| {
                    RunnerError::Translate(format!("translate failed for example {example_id:?}: {e}"))
                })?,
                Err(e) => {
                    return Err(RunnerError::Translate(format!(
                        "translate failed for example {example_id:?}: {e}"
                    )))
                }
            };
            let body: serde_json::Value = response.into_json().map_err(|e| {
                RunnerError::Translate(format!("bad translate response for example {example_id:?}: {e}"))
            })?;
            body.get("text")
                .and_then(|t| t.as_str())
                .map(crate::task::nfc)
                .ok_or_else(|| {
                    RunnerError::Translate(format!(
                        "translate response missing \"text\" for example {example_id:?}"
                    ))
                })
        };

        match &self.cache {
            None => fetch(),
            Some(cache) => {
                let key = DiskCache::key(&backend_id, "/v1/translate", &request);
                if let Some(hit) = cache.get::<String>(&key) {
                    return Ok(hit);
                }
                let text = fetch()?;
                cache.put(&key, &text)?;
                Ok(text)
            }
        }
    }

    /// Translate every field of an example, retagging its language for
    /// template selection. Ids, payloads and selectors are preserved;
    /// templates and verbalizers are never translated.
    pub fn transform_example(&self, example: &Example) -> Result<Example, RunnerError> {
        let mut fields = example.fields.clone();
        for (_, value) in fields.iter_mut() {
            *value = self.translate(value, example.lang.as_str(), &example.id)?;
        }
        Ok(Example { lang: self.target_lang.clone(), fields, ..example.clone() })
    }

    pub fn transform_examples(&self, examples: &[&Example]) -> Result<Vec<Example>, RunnerError> {
        examples.iter().map(|e| self.transform_example(e)).collect()
    }
}
