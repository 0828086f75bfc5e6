//! Cloze-style prompt templates with verbalizers.
//!
//! A pattern is inserted verbatim: `{field}` placeholders pull example
//! fields, `[Mask]` marks where the verbalized candidate goes, and
//! `{{` / `}}` escape literal braces. Whitespace belongs to the
//! template author; nothing is inserted around the mask.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::{nfc, Example, LanguageCode, MASK_TOKEN};

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("pattern {selector:?} must contain exactly one [Mask], found {found}")]
    MaskCount { selector: String, found: usize },
    #[error("pattern {selector:?} has unbalanced braces at char {at}")]
    UnbalancedBraces { selector: String, at: usize },
    #[error("pattern {selector:?} is empty")]
    EmptyPattern { selector: String },
    #[error("pattern {selector:?} has an empty field placeholder")]
    EmptyField { selector: String },
    #[error("template has no patterns")]
    NoPatterns,
    #[error("example {example:?} is missing field {field:?}")]
    MissingField { example: String, field: String },
    #[error("unknown selector {selector:?} for example {example:?}")]
    UnknownSelector { selector: String, example: String },
    #[error("candidate {0:?} not in verbalizer domain")]
    UnknownCandidate(String),
    #[error("verbalizer must cover label {0:?}")]
    MissingLabel(String),
    #[error("verbalizer is not injective: {a:?} and {b:?} both map to {to:?}")]
    NotInjective { a: String, b: String, to: String },
    #[error("generation requires terminal mask")]
    NonTerminalMask,
    #[error("mask expected in field content for example {example:?}, found {found}")]
    FieldMaskCount { example: String, found: usize },
    #[error("no template for language {0:?}")]
    MissingLanguage(String),
    #[error("malformed template descriptor: {0}")]
    BadDescriptor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(String),
    Mask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    segments: Vec<Segment>,
}

impl Pattern {
    fn fields(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Field(name) => Some(name.as_str()),
            _ => None,
        })
    }
}

/// Maps labels or choices to the surface string substituted at the
/// mask. `Identity` inserts the candidate itself (multiple choice);
/// `Map` must cover the task's full label space injectively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Verbalizer {
    #[serde(with = "identity_verbalizer")]
    Identity,
    Map(BTreeMap<String, String>),
}

mod identity_verbalizer {
    pub fn serialize<S: serde::Serializer>(serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str("identity")
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(deserializer: D) -> Result<(), D::Error> {
        let s = <String as serde::Deserialize>::deserialize(deserializer)?;
        if s == "identity" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"identity\", got {s:?}")))
        }
    }
}

impl Verbalizer {
    pub fn apply(&self, candidate: &str) -> Result<String, TemplateError> {
        match self {
            Verbalizer::Identity => Ok(candidate.to_string()),
            Verbalizer::Map(map) => map
                .get(candidate)
                .cloned()
                .ok_or_else(|| TemplateError::UnknownCandidate(candidate.to_string())),
        }
    }

    /// A map verbalizer must cover the label space and be injective.
    pub fn validate(&self, label_space: &[String]) -> Result<(), TemplateError> {
        let Verbalizer::Map(map) = self else { return Ok(()) };
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for label in label_space {
            let surface =
                map.get(label).ok_or_else(|| TemplateError::MissingLabel(label.clone()))?;
            if let Some(prev) = seen.insert(surface, label) {
                return Err(TemplateError::NotInjective {
                    a: prev.to_string(),
                    b: label.clone(),
                    to: surface.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Template descriptor file: one per (task, language).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateDescriptor {
    pub task: String,
    pub language: LanguageCode,
    pub patterns: BTreeMap<String, String>,
    pub verbalizer: Verbalizer,
    /// Set for tasks whose mask arrives inside a field (the loader has
    /// rewritten a blank marker to the mask token).
    #[serde(default)]
    pub mask_in_field: bool,
}

#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub task: String,
    pub lang: LanguageCode,
    patterns: BTreeMap<String, Pattern>,
    verbalizer: Verbalizer,
}

pub const DEFAULT_SELECTOR: &str = "*";

/// Parse and validate a template descriptor.
pub fn parse_template(descriptor: &TemplateDescriptor) -> Result<PromptTemplate, TemplateError> {
    if descriptor.patterns.is_empty() {
        return Err(TemplateError::NoPatterns);
    }
    let mut patterns = BTreeMap::new();
    for (selector, raw) in &descriptor.patterns {
        let selector = nfc(selector);
        let pattern = parse_pattern(&nfc(raw), &selector)?;
        let masks = pattern.segments.iter().filter(|s| matches!(s, Segment::Mask)).count();
        let expected = usize::from(!descriptor.mask_in_field);
        if masks != expected {
            return Err(TemplateError::MaskCount { selector, found: masks });
        }
        patterns.insert(selector, pattern);
    }
    Ok(PromptTemplate {
        task: descriptor.task.clone(),
        lang: descriptor.language.clone(),
        patterns,
        verbalizer: descriptor.verbalizer.clone(),
    })
}

pub fn parse_template_json(json: &str) -> Result<PromptTemplate, TemplateError> {
    let descriptor: TemplateDescriptor =
        serde_json::from_str(json).map_err(|e| TemplateError::BadDescriptor(e.to_string()))?;
    parse_template(&descriptor)
}

pub fn load_template(path: &Path) -> Result<PromptTemplate, TemplateError> {
    parse_template_json(&std::fs::read_to_string(path)?)
}

fn parse_pattern(raw: &str, selector: &str) -> Result<Pattern, TemplateError> {
    if raw.is_empty() {
        return Err(TemplateError::EmptyPattern { selector: selector.to_string() });
    }
    let mut segments: Vec<Segment> = Vec::new();
    let mut literal = String::new();
    let chars: Vec<char> = raw.chars().collect();
    let mut i = 0;
    let flush = |literal: &mut String, segments: &mut Vec<Segment>| {
        if !literal.is_empty() {
            segments.push(Segment::Literal(std::mem::take(literal)));
        }
    };
    while i < chars.len() {
        match chars[i] {
            '{' if chars.get(i + 1) == Some(&'{') => {
                literal.push('{');
                i += 2;
            }
            '}' if chars.get(i + 1) == Some(&'}') => {
                literal.push('}');
                i += 2;
            }
            '{' => {
                let close = chars[i + 1..]
                    .iter()
                    .position(|&c| c == '}')
                    .ok_or(TemplateError::UnbalancedBraces { selector: selector.to_string(), at: i })?;
                let name: String = chars[i + 1..i + 1 + close].iter().collect();
                if name.is_empty() {
                    return Err(TemplateError::EmptyField { selector: selector.to_string() });
                }
                if name.contains('{') {
                    return Err(TemplateError::UnbalancedBraces { selector: selector.to_string(), at: i });
                }
                flush(&mut literal, &mut segments);
                segments.push(Segment::Field(name));
                i += close + 2;
            }
            '}' => {
                return Err(TemplateError::UnbalancedBraces { selector: selector.to_string(), at: i })
            }
            '[' if raw_starts_with(&chars[i..], MASK_TOKEN) => {
                flush(&mut literal, &mut segments);
                segments.push(Segment::Mask);
                i += MASK_TOKEN.chars().count();
            }
            c => {
                literal.push(c);
                i += 1;
            }
        }
    }
    flush(&mut literal, &mut segments);
    Ok(Pattern { segments })
}

fn raw_starts_with(chars: &[char], token: &str) -> bool {
    let token: Vec<char> = token.chars().collect();
    chars.len() >= token.len() && chars[..token.len()] == token[..]
}

/// A template applied to an example with a candidate substituted at
/// the mask. `mask_span` is a [start, end) character range; the text
/// at that range is exactly the verbalized candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstantiatedPrompt {
    pub text: String,
    pub mask_span: (usize, usize),
    pub template_lang: LanguageCode,
    pub example_id: String,
}

impl InstantiatedPrompt {
    fn byte_span(&self) -> (usize, usize) {
        let mut start = self.text.len();
        let mut end = self.text.len();
        for (chars_seen, (byte, _)) in self.text.char_indices().enumerate() {
            if chars_seen == self.mask_span.0 {
                start = byte;
            }
            if chars_seen == self.mask_span.1 {
                end = byte;
                break;
            }
        }
        if self.mask_span.0 >= self.text.chars().count() {
            start = self.text.len();
        }
        (start, end)
    }

    /// Text before the mask span.
    pub fn prefix(&self) -> &str {
        &self.text[..self.byte_span().0]
    }

    /// The verbalized candidate occupying the mask span.
    pub fn mask_text(&self) -> &str {
        let (start, end) = self.byte_span();
        &self.text[start..end]
    }

    /// Text after the mask span.
    pub fn suffix(&self) -> &str {
        &self.text[self.byte_span().1..]
    }

    /// Reconstructs the uninstantiated form by splicing the mask token
    /// back over the mask span.
    pub fn with_mask_token(&self) -> String {
        format!("{}{}{}", self.prefix(), MASK_TOKEN, self.suffix())
    }

    /// Shift the mask span by a prefix prepended to the text.
    pub fn rebase(&self, prefix: &str) -> InstantiatedPrompt {
        let offset = prefix.chars().count();
        InstantiatedPrompt {
            text: format!("{prefix}{}", self.text),
            mask_span: (self.mask_span.0 + offset, self.mask_span.1 + offset),
            template_lang: self.template_lang.clone(),
            example_id: self.example_id.clone(),
        }
    }
}

impl PromptTemplate {
    pub fn verbalizer(&self) -> &Verbalizer {
        &self.verbalizer
    }

    /// Field names referenced by any pattern.
    pub fn fields(&self) -> BTreeSet<&str> {
        self.patterns.values().flat_map(|p| p.fields()).collect()
    }

    fn resolve_pattern(&self, example: &Example) -> Result<&Pattern, TemplateError> {
        if let Some(selector) = &example.selector {
            if let Some(pattern) = self.patterns.get(selector) {
                return Ok(pattern);
            }
        }
        self.patterns.get(DEFAULT_SELECTOR).ok_or_else(|| TemplateError::UnknownSelector {
            selector: example.selector.clone().unwrap_or_else(|| DEFAULT_SELECTOR.into()),
            example: example.id.clone(),
        })
    }
}

/// Substitute fields and the verbalized candidate into the template,
/// recording where the candidate landed.
pub fn instantiate(
    template: &PromptTemplate,
    example: &Example,
    candidate: &str,
    verbalizer: &Verbalizer,
) -> Result<InstantiatedPrompt, TemplateError> {
    let pattern = template.resolve_pattern(example)?;
    let verbalized = verbalizer.apply(candidate)?;
    let mut text = String::new();
    let mut chars = 0usize;
    let mut span: Option<(usize, usize)> = None;
    for segment in &pattern.segments {
        match segment {
            Segment::Literal(lit) => {
                text.push_str(lit);
                chars += lit.chars().count();
            }
            Segment::Field(name) => {
                let value = example.fields.get(name).ok_or_else(|| TemplateError::MissingField {
                    example: example.id.clone(),
                    field: name.clone(),
                })?;
                text.push_str(value);
                chars += value.chars().count();
            }
            Segment::Mask => {
                let start = chars;
                text.push_str(&verbalized);
                chars += verbalized.chars().count();
                span = Some((start, chars));
            }
        }
    }

    let mask_span = match span {
        Some(span) => span,
        None => {
            // Mask arrives via field content (mask_in_field templates).
            let occurrences: Vec<usize> = find_char_offsets(&text, MASK_TOKEN);
            if occurrences.len() != 1 {
                return Err(TemplateError::FieldMaskCount {
                    example: example.id.clone(),
                    found: occurrences.len(),
                });
            }
            let start = occurrences[0];
            let mask_chars = MASK_TOKEN.chars().count();
            let byte_start = char_to_byte(&text, start);
            let byte_end = char_to_byte(&text, start + mask_chars);
            text = format!("{}{}{}", &text[..byte_start], verbalized, &text[byte_end..]);
            (start, start + verbalized.chars().count())
        }
    };

    Ok(InstantiatedPrompt {
        text,
        mask_span,
        template_lang: template.lang.clone(),
        example_id: example.id.clone(),
    })
}

fn find_char_offsets(text: &str, needle: &str) -> Vec<usize> {
    text.match_indices(needle).map(|(byte, _)| text[..byte].chars().count()).collect()
}

fn char_to_byte(text: &str, char_offset: usize) -> usize {
    text.char_indices().nth(char_offset).map_or(text.len(), |(b, _)| b)
}

/// Instantiate an example with its gold annotation substituted at the
/// mask: the demonstration form used as few-shot context.
pub fn instantiate_with_gold(
    template: &PromptTemplate,
    example: &Example,
) -> Result<InstantiatedPrompt, TemplateError> {
    use crate::task::Payload;
    let candidate = match &example.payload {
        Payload::Label(label) => label.as_str(),
        Payload::Choices { choices, answer } => choices[*answer].as_str(),
        Payload::Reference(reference) => reference.as_str(),
    };
    instantiate(template, example, candidate, &template.verbalizer)
}

/// Prompt prefix for free-form generation: the pattern rendered with
/// the mask removed. The mask must be the final non-whitespace element.
pub fn render_generation_query(
    template: &PromptTemplate,
    example: &Example,
) -> Result<String, TemplateError> {
    let pattern = template.resolve_pattern(example)?;
    let mask_pos = pattern
        .segments
        .iter()
        .position(|s| matches!(s, Segment::Mask))
        .ok_or(TemplateError::NonTerminalMask)?;
    for segment in &pattern.segments[mask_pos + 1..] {
        match segment {
            Segment::Literal(lit) if lit.chars().all(char::is_whitespace) => {}
            _ => return Err(TemplateError::NonTerminalMask),
        }
    }
    let mut text = String::new();
    for segment in &pattern.segments {
        match segment {
            Segment::Literal(lit) => text.push_str(lit),
            Segment::Field(name) => {
                text.push_str(example.fields.get(name).ok_or_else(|| TemplateError::MissingField {
                    example: example.id.clone(),
                    field: name.clone(),
                })?);
            }
            Segment::Mask => {}
        }
    }
    Ok(text)
}

/// Which language's template serializes an example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateMode {
    /// Template in the example's own language.
    SameLanguage,
    /// One fixed template language applied to all examples
    /// (code-switched prompts).
    SourceLanguage(LanguageCode),
}

/// Templates for one task, indexed by language.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    by_lang: BTreeMap<LanguageCode, PromptTemplate>,
}

impl TemplateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.by_lang.insert(template.lang.clone(), template);
    }

    pub fn load_files<P: AsRef<Path>>(paths: impl IntoIterator<Item = P>) -> Result<Self, TemplateError> {
        let mut set = Self::new();
        for path in paths {
            set.insert(load_template(path.as_ref())?);
        }
        Ok(set)
    }

    pub fn get(&self, lang: &LanguageCode) -> Result<&PromptTemplate, TemplateError> {
        self.by_lang
            .get(lang)
            .ok_or_else(|| TemplateError::MissingLanguage(lang.as_str().to_string()))
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageCode> {
        self.by_lang.keys()
    }
}

/// Same-language mode selects the example-language template;
/// source-language mode selects the fixed source template for every
/// example.
pub fn select_template<'s>(
    mode: &TemplateMode,
    templates: &'s TemplateSet,
    example_lang: &LanguageCode,
) -> Result<&'s PromptTemplate, TemplateError> {
    match mode {
        TemplateMode::SameLanguage => templates.get(example_lang),
        TemplateMode::SourceLanguage(source) => templates.get(source),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::Payload;
    use std::collections::BTreeMap as Map;

    fn nli_descriptor() -> TemplateDescriptor {
        TemplateDescriptor {
            task: "nli".into(),
            language: LanguageCode::new("en").unwrap(),
            patterns: Map::from([("*".to_string(), "{sentence1}, right? [Mask], {sentence2}".to_string())]),
            verbalizer: Verbalizer::Map(Map::from([
                ("entailment".to_string(), "Yes".to_string()),
                ("contradiction".to_string(), "No".to_string()),
                ("neutral".to_string(), "Also".to_string()),
            ])),
            mask_in_field: false,
        }
    }

    fn nli_example(s1: &str, s2: &str) -> Example {
        Example {
            id: "e1".into(),
            lang: LanguageCode::new("en").unwrap(),
            fields: Map::from([
                ("sentence1".to_string(), s1.to_string()),
                ("sentence2".to_string(), s2.to_string()),
            ]),
            payload: Payload::Label("entailment".into()),
            selector: None,
        }
    }

    #[test]
    fn parses_fields_and_single_mask() {
        let template = parse_template(&nli_descriptor()).unwrap();
        assert_eq!(template.fields(), BTreeSet::from(["sentence1", "sentence2"]));
    }

    #[test]
    fn rejects_missing_or_extra_masks() {
        let mut d = nli_descriptor();
        d.patterns.insert("*".into(), "{sentence1} and {sentence2}".into());
        assert!(matches!(parse_template(&d).unwrap_err(), TemplateError::MaskCount { found: 0, .. }));
        d.patterns.insert("*".into(), "[Mask] {sentence1} [Mask]".into());
        assert!(matches!(parse_template(&d).unwrap_err(), TemplateError::MaskCount { found: 2, .. }));
    }

    #[test]
    fn rejects_unbalanced_braces_and_empty_patterns() {
        let mut d = nli_descriptor();
        d.patterns.insert("*".into(), "{sentence1, right? [Mask]".into());
        assert!(matches!(parse_template(&d).unwrap_err(), TemplateError::UnbalancedBraces { .. }));
        d.patterns.insert("*".into(), "".into());
        assert!(matches!(parse_template(&d).unwrap_err(), TemplateError::EmptyPattern { .. }));
        d.patterns.insert("*".into(), "ok} [Mask]".into());
        assert!(matches!(parse_template(&d).unwrap_err(), TemplateError::UnbalancedBraces { .. }));
    }

    #[test]
    fn escaped_braces_are_literals() {
        let mut d = nli_descriptor();
        d.patterns.insert("*".into(), "{{json}} {sentence1} [Mask]".into());
        let template = parse_template(&d).unwrap();
        let prompt = instantiate(&template, &nli_example("A", "B"), "entailment", template.verbalizer()).unwrap();
        assert_eq!(prompt.text, "{json} A Yes");
    }

    #[test]
    fn instantiates_with_mask_span() {
        let template = parse_template(&nli_descriptor()).unwrap();
        let prompt = instantiate(&template, &nli_example("A", "B"), "entailment", template.verbalizer()).unwrap();
        assert_eq!(prompt.text, "A, right? Yes, B");
        assert_eq!(prompt.mask_text(), "Yes");
        assert_eq!(prompt.prefix(), "A, right? ");
        assert_eq!(prompt.suffix(), ", B");
        assert_eq!(prompt.with_mask_token(), "A, right? [Mask], B");
    }

    #[test]
    fn selector_patterns_resolve() {
        let d = TemplateDescriptor {
            task: "copa".into(),
            language: LanguageCode::new("en").unwrap(),
            patterns: Map::from([
                ("cause".to_string(), "{premise} because [Mask]".to_string()),
                ("effect".to_string(), "{premise} so [Mask]".to_string()),
            ]),
            verbalizer: Verbalizer::Identity,
            mask_in_field: false,
        };
        let template = parse_template(&d).unwrap();
        let mut example = Example {
            id: "c1".into(),
            lang: LanguageCode::new("en").unwrap(),
            fields: Map::from([("premise".to_string(), "It rained".to_string())]),
            payload: Payload::Choices { choices: vec!["clouds".into(), "drought".into()], answer: 0 },
            selector: Some("cause".into()),
        };
        let prompt = instantiate(&template, &example, "clouds", template.verbalizer()).unwrap();
        assert_eq!(prompt.text, "It rained because clouds");
        example.selector = Some("unknown".into());
        assert!(matches!(
            instantiate(&template, &example, "clouds", template.verbalizer()).unwrap_err(),
            TemplateError::UnknownSelector { .. }
        ));
    }

    #[test]
    fn mask_leading_pattern_works() {
        // zh-style cause pattern with the mask up front and no spacing
        let d = TemplateDescriptor {
            task: "copa".into(),
            language: LanguageCode::new("zh").unwrap(),
            patterns: Map::from([("cause".to_string(), "\u{56e0}\u{4e3a}[Mask]\u{ff0c}\u{6240}\u{4ee5}{premise}".to_string())]),
            verbalizer: Verbalizer::Identity,
            mask_in_field: false,
        };
        let template = parse_template(&d).unwrap();
        let example = Example {
            id: "z1".into(),
            lang: LanguageCode::new("zh").unwrap(),
            fields: Map::from([("premise".to_string(), "\u{5979}\u{8fdf}\u{5230}\u{4e86}".to_string())]),
            payload: Payload::Choices { choices: vec!["\u{4e0b}\u{96e8}".into()], answer: 0 },
            selector: Some("cause".into()),
        };
        let prompt = instantiate(&template, &example, "\u{4e0b}\u{96e8}", template.verbalizer()).unwrap();
        assert_eq!(prompt.text, "\u{56e0}\u{4e3a}\u{4e0b}\u{96e8}\u{ff0c}\u{6240}\u{4ee5}\u{5979}\u{8fdf}\u{5230}\u{4e86}");
        assert_eq!(prompt.mask_span, (2, 4));
        assert_eq!(prompt.mask_text(), "\u{4e0b}\u{96e8}");
    }

    #[test]
    fn mask_in_field_template_splices_candidate() {
        let d = TemplateDescriptor {
            task: "wino".into(),
            language: LanguageCode::new("en").unwrap(),
            patterns: Map::from([("*".to_string(), "{context}".to_string())]),
            verbalizer: Verbalizer::Identity,
            mask_in_field: true,
        };
        let template = parse_template(&d).unwrap();
        let example = Example {
            id: "w1".into(),
            lang: LanguageCode::new("en").unwrap(),
            fields: Map::from([(
                "context".to_string(),
                "The cup broke because [Mask] was fragile.".to_string(),
            )]),
            payload: Payload::Choices { choices: vec!["the cup".into(), "the shelf".into()], answer: 0 },
            selector: None,
        };
        let prompt = instantiate(&template, &example, "the cup", template.verbalizer()).unwrap();
        assert_eq!(prompt.text, "The cup broke because the cup was fragile.");
        assert_eq!(prompt.mask_text(), "the cup");
        assert_eq!(prompt.with_mask_token(), "The cup broke because [Mask] was fragile.");
    }

    #[test]
    fn generation_query_strips_terminal_mask() {
        let d = TemplateDescriptor {
            task: "mt".into(),
            language: LanguageCode::new("en").unwrap(),
            patterns: Map::from([("*".to_string(), "{source} = [Mask]".to_string())]),
            verbalizer: Verbalizer::Identity,
            mask_in_field: false,
        };
        let template = parse_template(&d).unwrap();
        let mut example = nli_example("x", "y");
        example.fields.insert("source".into(), "Bonjour".into());
        assert_eq!(render_generation_query(&template, &example).unwrap(), "Bonjour = ");
        example.fields.insert("source".into(), "".into());
        assert_eq!(render_generation_query(&template, &example).unwrap(), " = ");
    }

    #[test]
    fn generation_query_rejects_mid_pattern_mask() {
        let template = parse_template(&nli_descriptor()).unwrap();
        assert!(matches!(
            render_generation_query(&template, &nli_example("A", "B")).unwrap_err(),
            TemplateError::NonTerminalMask
        ));
    }

    #[test]
    fn missing_field_and_unknown_candidate_error() {
        let template = parse_template(&nli_descriptor()).unwrap();
        let mut example = nli_example("A", "B");
        example.fields.remove("sentence2");
        assert!(matches!(
            instantiate(&template, &example, "entailment", template.verbalizer()).unwrap_err(),
            TemplateError::MissingField { .. }
        ));
        let example = nli_example("A", "B");
        assert!(matches!(
            instantiate(&template, &example, "bogus", template.verbalizer()).unwrap_err(),
            TemplateError::UnknownCandidate(_)
        ));
    }

    #[test]
    fn verbalizer_validation() {
        let v = Verbalizer::Map(Map::from([
            ("a".to_string(), "Yes".to_string()),
            ("b".to_string(), "Yes".to_string()),
        ]));
        assert!(matches!(
            v.validate(&["a".to_string(), "b".to_string()]).unwrap_err(),
            TemplateError::NotInjective { .. }
        ));
        assert!(matches!(
            v.validate(&["a".to_string(), "c".to_string()]).unwrap_err(),
            TemplateError::MissingLabel(_)
        ));
        Verbalizer::Identity.validate(&["anything".to_string()]).unwrap();
    }

    #[test]
    fn source_language_selection_ignores_example_lang() {
        let mut set = TemplateSet::new();
        set.insert(parse_template(&nli_descriptor()).unwrap());
        let mut vi = nli_descriptor();
        vi.language = LanguageCode::new("vi").unwrap();
        set.insert(parse_template(&vi).unwrap());

        let en = LanguageCode::new("en").unwrap();
        let mode = TemplateMode::SourceLanguage(en.clone());
        for lang in ["vi", "en"] {
            let code = LanguageCode::new(lang).unwrap();
            let selected = select_template(&mode, &set, &code).unwrap();
            assert_eq!(selected.lang, en);
        }
        let same = TemplateMode::SameLanguage;
        let vi_code = LanguageCode::new("vi").unwrap();
        assert_eq!(select_template(&same, &set, &vi_code).unwrap().lang, vi_code);
        let sw = LanguageCode::new("sw").unwrap();
        assert!(matches!(select_template(&same, &set, &sw).unwrap_err(), TemplateError::MissingLanguage(_)));
    }

    #[test]
    fn rebase_shifts_mask_span() {
        let template = parse_template(&nli_descriptor()).unwrap();
        let prompt = instantiate(&template, &nli_example("A", "B"), "entailment", template.verbalizer()).unwrap();
        let rebased = prompt.rebase("demo one\n");
        assert_eq!(rebased.text, "demo one\nA, right? Yes, B");
        assert_eq!(rebased.mask_text(), "Yes");
        assert_eq!(rebased.prefix(), "demo one\nA, right? ");
    }
}
