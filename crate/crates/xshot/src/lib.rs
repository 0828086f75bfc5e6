//! Multilingual in-context learning evaluation harness.
//!
//! The crate evaluates causal language models on classification,
//! multiple-choice, cloze-probing and generation tasks via prompt
//! templates with verbalizers, zero-/few-shot candidate scoring,
//! cross-lingual prompt and demonstration composition, context-window
//! truncation and multi-seed metric aggregation. Exactly computable
//! byte-level oracle models (uniform, smoothed n-gram, context-cache)
//! make every number verifiable at desk scale; a remote HTTP backend
//! plugs real models into the same pipeline.

pub mod backend;
pub mod fewshot;
pub mod metrics;
pub mod runner;
pub mod scoring;
pub mod task;
pub mod template;

pub use backend::{GenerationParams, LanguageModel, LmDescriptor, ScoredTokens, TokenId};
pub use task::{Example, LanguageCode, ResourceLevel, Task, TaskKind};
pub use template::{InstantiatedPrompt, PromptTemplate, TemplateMode, Verbalizer};
