use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use xshot::backend::{NgramBackend, NgramModel, RemoteBackend, RemoteConfig, UniformBackend};
use xshot::fewshot::{max_fit_rows_to_csv, max_fit_stats, SamplingStrategy, SeparatorSpec};
use xshot::metrics::GroupKey;
use xshot::runner::{render_report_files, run_eval, BackendSpec, EvalConfig};
use xshot::scoring::{CalibrationSpec, ScoringFunction};
use xshot::task::{load_task, LanguageCode};
use xshot::template::{TemplateMode, TemplateSet};
use xshot::LanguageModel;

#[derive(Parser)]
#[command(
    name = "xshot",
    about = "Multilingual in-context learning evaluation harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte n-gram oracle model on a corpus file.
    TrainNgram {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        order: usize,
        #[arg(long = "add-k")]
        add_k: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a zero-/few-shot evaluation and write records and reports.
    Eval(EvalArgs),
    /// Report the mean number of demonstrations that fit the context
    /// window, per language.
    Maxfit(MaxfitArgs),
    /// Regenerate report tables from persisted records.
    Report {
        /// Records file or the directory containing records.jsonl.
        #[arg(long = "in")]
        input: PathBuf,
        /// Comma-separated grouping keys (lang, resource_level).
        #[arg(long = "group-by", default_value = "lang,resource_level")]
        group_by: String,
        /// Output directory; defaults next to the records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    templates: Vec<PathBuf>,
    /// uniform | ngram:PATH | remote:URL
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated shot counts, e.g. 0,4,32.
    #[arg(long, value_delimiter = ',')]
    shots: Vec<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// sum | mean | mean-skip-prefix | suffix | uncond | char
    #[arg(long)]
    scoring: Option<String>,
    #[arg(long)]
    answer_context: Option<String>,
    #[arg(long)]
    calibrate: bool,
    /// same | source (source requires --template-lang)
    #[arg(long)]
    template_mode: Option<String>,
    #[arg(long)]
    template_lang: Option<String>,
    #[arg(long)]
    demo_lang: Option<String>,
    #[arg(long)]
    eval_split: Option<String>,
    #[arg(long, value_delimiter = ',')]
    langs: Vec<String>,
    #[arg(long)]
    separator: Option<String>,
    /// random-total | per-class-uniform
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    translate_test: Option<String>,
    #[arg(long)]
    probe_candidates: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    context_length: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    per_example_resample: bool,
    #[arg(long)]
    dump_prompts: bool,
}

#[derive(Args)]
struct MaxfitArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long, value_delimiter = ',')]
    templates: Vec<PathBuf>,
    /// uniform | ngram:PATH | remote:URL
    #[arg(long)]
    backend: String,
    #[arg(long, default_value = "\n")]
    sep: String,
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 2048)]
    context_length: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tokens reserved for generation headroom.
    #[arg(long, default_value_t = 0)]
    reserve: usize,
    #[arg(long)]
    template_mode: Option<String>,
    #[arg(long)]
    template_lang: Option<String>,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scoring(name: &str, answer_context: Option<&str>) -> Result<ScoringFunction> {
    Ok(match name {
        "sum" | "sum-logprob" => ScoringFunction::SumLogprob,
        "mean" | "mean-logprob" => ScoringFunction::MeanLogprob,
        "mean-skip-prefix" | "mean-skip-common-prefix" => ScoringFunction::MeanSkipCommonPrefix,
        "suffix" | "common-suffix-logprob" => ScoringFunction::CommonSuffixLogprob,
        "uncond" | "uncond-normalized" => ScoringFunction::UncondNormalized {
            answer_context: answer_context.unwrap_or(xshot::scoring::DEFAULT_ANSWER_CONTEXT).to_string(),
        },
        "char" | "char-normalized" => ScoringFunction::CharNormalized,
        other => bail!("unknown scoring function {other:?}"),
    })
}

fn parse_template_mode(mode: &str, template_lang: Option<&str>) -> Result<TemplateMode> {
    Ok(match mode {
        "same" | "same-language" => TemplateMode::SameLanguage,
        "source" | "source-language" => {
            let lang = template_lang
                .context("--template-mode source requires --template-lang")?;
            TemplateMode::SourceLanguage(LanguageCode::new(lang)?)
        }
        other => bail!("unknown template mode {other:?}"),
    })
}

fn parse_strategy(name: &str) -> Result<SamplingStrategy> {
    Ok(match name {
        "random-total" => SamplingStrategy::RandomTotal,
        "per-class-uniform" => SamplingStrategy::PerClassUniform,
        other => bail!("unknown sampling strategy {other:?}"),
    })
}

fn merge_eval_config(args: &EvalArgs) -> Result<EvalConfig> {
    let mut config: EvalConfig = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            EvalConfig::from_json(&raw).map_err(|e| anyhow::anyhow!("parsing config: {e}"))?
        }
        None => {
            let task = args.task.clone().context("--task required without --config")?;
            let backend = args.backend.clone().context("--backend required without --config")?;
            let out = args.out.clone().context("--out required without --config")?;
            if args.templates.is_empty() {
                bail!("--templates required without --config");
            }
            EvalConfig::from_json(&serde_json::json!({
                "task": task,
                "templates": args.templates,
                "backend": backend,
                "out_dir": out,
            }).to_string())
            .map_err(|e| anyhow::anyhow!("building config: {e}"))?
        }
    };

    if let Some(task) = &args.task {
        config.task = task.clone();
    }
    if !args.templates.is_empty() {
        config.templates = args.templates.clone();
    }
    if let Some(backend) = &args.backend {
        config.backend = BackendSpec::try_from(backend.clone()).map_err(|e| anyhow::anyhow!(e))?;
    }
    if !args.shots.is_empty() {
        config.shots = args.shots.clone();
    }
    if let Some(runs) = args.runs {
        config.n_runs = runs;
    }
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(scoring) = &args.scoring {
        config.scoring = parse_scoring(scoring, args.answer_context.as_deref())?;
    }
    if args.calibrate {
        config.calibration = CalibrationSpec { enabled: true, ..config.calibration };
    }
    if let Some(mode) = &args.template_mode {
        config.template_mode = parse_template_mode(mode, args.template_lang.as_deref())?;
    }
    if let Some(lang) = &args.demo_lang {
        config.demo_lang = Some(LanguageCode::new(lang.clone())?);
    }
    if let Some(split) = &args.eval_split {
        config.eval_split = Some(split.clone());
    }
    if !args.langs.is_empty() {
        config.langs = Some(
            args.langs.iter().map(|l| LanguageCode::new(l.clone())).collect::<Result<_, _>>()?,
        );
    }
    if let Some(sep) = &args.separator {
        config.separator = SeparatorSpec { separator: sep.clone() };
    }
    if let Some(strategy) = &args.strategy {
        config.strategy = parse_strategy(strategy)?;
    }
    if let Some(url) = &args.translate_test {
        config.translate_test = Some(url.clone());
    }
    if let Some(n) = args.probe_candidates {
        config.probe_candidates = Some(n);
    }
    if let Some(n) = args.max_new_tokens {
        config.max_new_tokens = n;
    }
    if let Some(n) = args.context_length {
        config.context_length = n;
    }
    if let Some(dir) = &args.cache_dir {
        config.cache_dir = Some(dir.clone());
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    config.per_example_resample |= args.per_example_resample;
    config.dump_prompts |= args.dump_prompts;
    Ok(config)
}

fn build_plain_backend(spec: &str, context_length: usize) -> Result<Box<dyn LanguageModel>> {
    Ok(match BackendSpec::try_from(spec.to_string()).map_err(|e| anyhow::anyhow!(e))? {
        BackendSpec::Uniform => Box::new(UniformBackend::new(context_length)?),
        BackendSpec::Ngram(path) => {
            let model = NgramModel::load(&path)
                .with_context(|| format!("loading n-gram model {}", path.display()))?;
            Box::new(NgramBackend::new(model, context_length)?)
        }
        BackendSpec::Remote(url) => Box::new(RemoteBackend::connect(RemoteConfig::new(url))?),
    })
}

fn parse_group_by(raw: &str) -> Result<Vec<GroupKey>> {
    let mut keys = vec![GroupKey::Task, GroupKey::K];
    for part in raw.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        keys.push(match part {
            "lang" => GroupKey::Lang,
            "resource_level" => GroupKey::ResourceLevel,
            "task" => GroupKey::Task,
            "k" => GroupKey::K,
            other => bail!("unknown grouping key {other:?}"),
        });
    }
    Ok(keys)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainNgram { corpus, order, add_k, out } => {
            let model = NgramModel::train_file(&corpus, order, add_k)
                .with_context(|| format!("training on {}", corpus.display()))?;
            model.save(&out)?;
            println!("wrote {} (order {order}, add-k {add_k})", out.display());
        }
        Command::Eval(args) => {
            let config = merge_eval_config(&args)?;
            let outcome = run_eval(&config)?;
            println!("records: {}", outcome.records_path.display());
            if let Some(csv) = &outcome.report_csv {
                println!("report:  {}", csv.display());
            }
            if let Some(txt) = &outcome.report_txt {
                println!("{}", std::fs::read_to_string(txt)?);
            }
            if !outcome.failures.is_empty() {
                eprintln!("{} cell(s) failed:", outcome.failures.len());
                for failure in &outcome.failures {
                    eprintln!("  {} k={} seed={}: {}", failure.lang, failure.k, failure.run_seed, failure.error);
                }
            }
        }
        Command::Maxfit(args) => {
            let task = load_task(&args.task)?;
            let templates = TemplateSet::load_files(&args.templates)?;
            let backend = build_plain_backend(&args.backend, args.context_length)?;
            let mode = match &args.template_mode {
                Some(mode) => parse_template_mode(mode, args.template_lang.as_deref())?,
                None => TemplateMode::SameLanguage,
            };
            let split = match &args.split {
                Some(split) => split.clone(),
                None if task.splits.contains_key("test") => "test".into(),
                None => task
                    .splits
                    .keys()
                    .next()
                    .context("task has no splits")?
                    .clone(),
            };
            let rows = max_fit_stats(
                &task,
                &templates,
                &mode,
                &backend,
                &SeparatorSpec { separator: args.sep.clone() },
                &split,
                args.seed,
                args.reserve,
            )?;
            let csv = max_fit_rows_to_csv(&rows);
            match &args.out {
                Some(path) => std::fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Report { input, group_by, out } => {
            let records = if input.is_dir() { input.join("records.jsonl") } else { input.clone() };
            let out_dir = out.unwrap_or_else(|| {
                records.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
            });
            let keys = parse_group_by(&group_by)?;
            let (csv, txt) = render_report_files(&records, &out_dir, &keys)?;
            println!("wrote {} and {}", csv.display(), txt.display());
            print!("{}", std::fs::read_to_string(txt)?);
        }
    }
    Ok(())
}
