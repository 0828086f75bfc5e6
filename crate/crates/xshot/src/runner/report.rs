//! Result persistence and report rendering.
//!
//! Results are an append-only JSONL file: one meta line describing the
//! run, one line per evaluated (example, k, run), and one line per
//! failed cell. Reports are regenerated from the persisted records, so
//! a rendered report always matches what a fresh `report` invocation
//! would produce from the same file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{
    self, accuracy, corpus_bleu, precision_at_1, precision_recall, GroupKey, MetricKind, RunRecord,
};
use crate::scoring::ScoringFunction;
use crate::task::{LanguageCode, LanguageInfo, ResourceLevel, TaskKind};

use super::RunnerError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordsMeta {
    pub task: String,
    pub kind: TaskKind,
    pub metric: MetricKind,
    pub languages: Vec<LanguageInfo>,
    pub eval_split: String,
    pub shots: Vec<usize>,
    pub n_runs: usize,
    pub backend_id: String,
    pub scoring: ScoringFunction,
    /// Harness decisions worth surfacing next to the numbers (e.g.
    /// whether translate-test transformed demonstrations too).
    pub notes: Vec<String>,
}

/// One evaluated example. `prompt_digest` is the SHA-256 of the
/// canonical JSON list of the exact candidate strings scored, enabling
/// byte-exact audits of what the backend saw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub lang: LanguageCode,
    pub k: usize,
    pub run_seed: u64,
    pub example_id: String,
    pub prediction: String,
    pub gold: String,
    pub correct: Option<bool>,
    pub candidate_scores: Vec<f64>,
    pub kept_demos: usize,
    pub dropped_demos: usize,
    pub prompt_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
}

/// A (lang, k, run) cell that aborted; other cells proceed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRow {
    pub task: String,
    pub lang: LanguageCode,
    pub k: usize,
    pub run_seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordLine {
    Meta(RecordsMeta),
    Result(ResultRow),
    Failure(FailureRow),
}

pub fn write_records(
    path: &Path,
    meta: &RecordsMeta,
    rows: &[ResultRow],
    failures: &[FailureRow],
) -> Result<(), RunnerError> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&RecordLine::Meta(meta.clone()))?);
    out.push('\n');
    let mut lines: Vec<RecordLine> = rows.iter().cloned().map(RecordLine::Result).collect();
    lines.extend(failures.iter().cloned().map(RecordLine::Failure));
    lines.sort_by(|a, b| line_sort_key(a).cmp(&line_sort_key(b)));
    for line in &lines {
        out.push_str(&serde_json::to_string(line)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn line_sort_key(line: &RecordLine) -> (String, usize, u64, String) {
    match line {
        RecordLine::Result(r) => {
            (r.lang.as_str().to_string(), r.k, r.run_seed, r.example_id.clone())
        }
        RecordLine::Failure(f) => (f.lang.as_str().to_string(), f.k, f.run_seed, String::new()),
        RecordLine::Meta(_) => (String::new(), 0, 0, String::new()),
    }
}

pub fn read_records(path: &Path) -> Result<(RecordsMeta, Vec<ResultRow>, Vec<FailureRow>), RunnerError> {
    let text = std::fs::read_to_string(path)?;
    let mut meta = None;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<RecordLine>(line)? {
            RecordLine::Meta(m) => meta = Some(m),
            RecordLine::Result(r) => rows.push(r),
            RecordLine::Failure(f) => failures.push(f),
        }
    }
    let meta = meta.ok_or_else(|| {
        RunnerError::Config(format!("{} has no meta line", path.display()))
    })?;
    Ok((meta, rows, failures))
}

/// Recompute per-(lang, k, run) metric values from example rows.
pub fn compute_run_records(meta: &RecordsMeta, rows: &[ResultRow]) -> Result<Vec<RunRecord>, RunnerError> {
    let mut cells: BTreeMap<(LanguageCode, usize, u64), Vec<&ResultRow>> = BTreeMap::new();
    for row in rows {
        cells.entry((row.lang.clone(), row.k, row.run_seed)).or_default().push(row);
    }
    let mut records = Vec::new();
    for ((lang, k, run_seed), members) in cells {
        let mut values = BTreeMap::new();
        match &meta.metric {
            MetricKind::Accuracy => {
                let correct: Vec<bool> =
                    members.iter().map(|r| r.correct.unwrap_or(false)).collect();
                let hits = correct.iter().filter(|c| **c).count();
                values.insert("accuracy".to_string(), hits as f64 / correct.len() as f64);
            }
            MetricKind::PrecisionRecall { positive_label } => {
                let preds: Vec<&str> = members.iter().map(|r| r.prediction.as_str()).collect();
                let golds: Vec<&str> = members.iter().map(|r| r.gold.as_str()).collect();
                let pr = precision_recall(&preds, &golds, positive_label)?;
                values.insert("precision".to_string(), pr.precision);
                values.insert("recall".to_string(), pr.recall);
                values.insert("accuracy".to_string(), accuracy(&preds, &golds)?);
            }
            MetricKind::PrecisionAt1 => {
                let relations: Vec<&str> =
                    members.iter().map(|r| r.relation.as_deref().unwrap_or("*")).collect();
                let correct: Vec<bool> =
                    members.iter().map(|r| r.correct.unwrap_or(false)).collect();
                values.insert("precision_at_1".to_string(), precision_at_1(&relations, &correct)?);
            }
            MetricKind::CorpusBleu => {
                let hyps: Vec<&str> = members.iter().map(|r| r.prediction.as_str()).collect();
                let refs: Vec<&str> = members.iter().map(|r| r.gold.as_str()).collect();
                values.insert("bleu-ws".to_string(), corpus_bleu(&hyps, &refs, 4)?);
            }
        }
        let resource_level = meta
            .languages
            .iter()
            .find(|l| l.code == lang)
            .map(|l| l.resource_level)
            .unwrap_or(ResourceLevel::Unknown);
        records.push(RunRecord {
            task: meta.task.clone(),
            lang,
            resource_level,
            k,
            run_seed,
            metrics: values,
            examples: members
                .iter()
                .map(|r| metrics::ExampleOutcome {
                    id: r.example_id.clone(),
                    lang: r.lang.clone(),
                    gold: r.gold.clone(),
                    predicted: r.prediction.clone(),
                    correct: r.correct,
                })
                .collect(),
        });
    }
    Ok(records)
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Per-language table with optional resource-level group means and an
/// overall "Avg." column (mean over language means).
pub fn render_tables(
    meta: &RecordsMeta,
    records: &[RunRecord],
    grouping: &[GroupKey],
) -> (String, String) {
    let langs: Vec<&LanguageInfo> = meta
        .languages
        .iter()
        .filter(|l| records.iter().any(|r| r.lang == l.code))
        .collect();
    let with_levels = grouping.contains(&GroupKey::ResourceLevel);
    let levels: Vec<ResourceLevel> = {
        let set: BTreeSet<ResourceLevel> = langs.iter().map(|l| l.resource_level).collect();
        let list: Vec<ResourceLevel> = set.into_iter().collect();
        if with_levels && (list.len() > 1 || list.first() != Some(&ResourceLevel::Unknown)) {
            list
        } else {
            Vec::new()
        }
    };

    let metric_names: BTreeSet<&str> =
        records.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let ks: BTreeSet<usize> = records.iter().map(|r| r.k).collect();

    // (metric, k, lang) -> per-run values
    let mut cell_values: BTreeMap<(&str, usize, &str), Vec<f64>> = BTreeMap::new();
    for record in records {
        for (name, value) in &record.metrics {
            cell_values
                .entry((name.as_str(), record.k, record.lang.as_str()))
                .or_default()
                .push(*value);
        }
    }

    let mut header: Vec<String> = vec!["task".into(), "metric".into(), "k".into()];
    header.extend(langs.iter().map(|l| l.code.as_str().to_string()));
    header.extend(levels.iter().map(|l| l.as_str().to_string()));
    header.push("Avg.".into());

    let mut csv = header.join(",") + "\n";
    let mut table: Vec<Vec<String>> = vec![header.clone()];

    for metric in &metric_names {
        for &k in &ks {
            let mut csv_row: Vec<String> = vec![meta.task.clone(), metric.to_string(), k.to_string()];
            let mut txt_row = csv_row.clone();
            let mut lang_means: Vec<(ResourceLevel, f64)> = Vec::new();
            for lang in &langs {
                match cell_values.get(&(*metric, k, lang.code.as_str())) {
                    Some(values) => {
                        let mean = metrics::mean(values);
                        let std = metrics::sample_std(values);
                        lang_means.push((lang.resource_level, mean));
                        csv_row.push(fmt(mean));
                        txt_row.push(if values.len() > 1 {
                            format!("{}\u{00b1}{}", fmt(mean), fmt(std))
                        } else {
                            fmt(mean)
                        });
                    }
                    None => {
                        csv_row.push(String::new());
                        txt_row.push("--".into());
                    }
                }
            }
            for level in &levels {
                let members: Vec<f64> = lang_means
                    .iter()
                    .filter(|(l, _)| l == level)
                    .map(|(_, m)| *m)
                    .collect();
                if members.is_empty() {
                    csv_row.push(String::new());
                    txt_row.push("--".into());
                } else {
                    let value = fmt(metrics::mean(&members));
                    csv_row.push(value.clone());
                    txt_row.push(value);
                }
            }
            if lang_means.is_empty() {
                csv_row.push(String::new());
                txt_row.push("--".into());
            } else {
                let all: Vec<f64> = lang_means.iter().map(|(_, m)| *m).collect();
                let value = fmt(metrics::mean(&all));
                csv_row.push(value.clone());
                txt_row.push(value);
            }
            csv.push_str(&csv_row.join(","));
            csv.push('\n');
            table.push(txt_row);
        }
    }

    (csv, render_aligned(&table, meta))
}

fn render_aligned(table: &[Vec<String>], meta: &RecordsMeta) -> String {
    let columns = table[0].len();
    let mut widths = vec![0usize; columns];
    for row in table {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = format!(
        "# {} ({}), backend {}, split {}\n",
        meta.task,
        match &meta.metric {
            MetricKind::CorpusBleu => "bleu-ws".to_string(),
            other => format!("{:?}", other).to_lowercase(),
        },
        meta.backend_id,
        meta.eval_split
    );
    for note in &meta.notes {
        out.push_str(&format!("# {note}\n"));
    }
    for row in table {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{cell:>width$}", width = widths[i]))
            .collect();
        out.push_str(&line.join("  "));
        out.push('\n');
    }
    out
}

/// Regenerate report files from persisted records.
pub fn render_report_files(
    records_path: &Path,
    out_dir: &Path,
    grouping: &[GroupKey],
) -> Result<(std::path::PathBuf, std::path::PathBuf), RunnerError> {
    let (meta, rows, _failures) = read_records(records_path)?;
    if rows.is_empty() {
        return Err(RunnerError::Config("no result rows to report".into()));
    }
    let records = compute_run_records(&meta, &rows)?;
    let (csv, txt) = render_tables(&meta, &records, grouping);
    std::fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("report.csv");
    let txt_path = out_dir.join("report.txt");
    std::fs::write(&csv_path, csv)?;
    std::fs::write(&txt_path, txt)?;
    Ok((csv_path, txt_path))
}
