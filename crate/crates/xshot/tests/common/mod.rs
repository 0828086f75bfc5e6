//! Shared synthetic fixtures for integration tests. Everything is
//! seeded and written to a temp dir so runs are reproducible.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const THREE_CLASS_LABELS: [&str; 3] = ["alpha", "beta", "gamma"];
pub const THREE_CLASS_SURFACES: [&str; 3] = ["red", "green", "blue"];

pub fn write(path: &Path, contents: &str) {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).unwrap();
    }
    std::fs::write(path, contents).unwrap();
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub struct ThreeClassFixture {
    pub task_path: PathBuf,
    pub template_path: PathBuf,
    pub corpus_path: PathBuf,
    pub model_path: PathBuf,
    /// (id, text, gold label) of the test split, in file order.
    pub test_examples: Vec<(String, String, String)>,
}

/// Synthetic 3-class classification task whose corpus makes the
/// dominant continuation of each item its gold label. Prompt shape:
/// "{text} -> [Mask]" with label surfaces red/green/blue.
pub fn three_class_fixture(dir: &Path, n_test: usize, n_train: usize, seed: u64) -> ThreeClassFixture {
    let mut rng = rng(seed);
    let vocab: Vec<String> = (0..24).map(|i| format!("item{i:02}")).collect();

    // corpus: each vocab word mostly followed by its dominant class
    let mut corpus = String::new();
    let mut lines: Vec<String> = Vec::new();
    for (i, word) in vocab.iter().enumerate() {
        let dominant = i % 3;
        for _ in 0..6 {
            lines.push(format!("{word} -> {}\n", THREE_CLASS_SURFACES[dominant]));
        }
        lines.push(format!("{word} -> {}\n", THREE_CLASS_SURFACES[(dominant + 1) % 3]));
        lines.push(format!("{word} -> {}\n", THREE_CLASS_SURFACES[(dominant + 2) % 3]));
    }
    lines.shuffle(&mut rng);
    for line in &lines {
        corpus.push_str(line);
    }
    let corpus_path = dir.join("corpus.txt");
    write(&corpus_path, &corpus);

    let model = xshot::backend::NgramModel::train(corpus.as_bytes(), 3, 0.01).unwrap();
    let model_path = dir.join("model.ngram");
    model.save(&model_path).unwrap();

    let make_examples = |rng: &mut ChaCha8Rng, prefix: &str, n: usize| -> Vec<(String, String, String)> {
        (0..n)
            .map(|i| {
                let word = vocab[rng.gen_range(0..vocab.len())].clone();
                let dominant = word[4..].parse::<usize>().unwrap() % 3;
                (format!("{prefix}{i:03}"), word, THREE_CLASS_LABELS[dominant].to_string())
            })
            .collect()
    };
    let test_examples = make_examples(&mut rng, "ex", n_test);
    let train_examples = make_examples(&mut rng, "tr", n_train);

    let jsonl = |examples: &[(String, String, String)]| -> String {
        examples
            .iter()
            .map(|(id, text, label)| {
                serde_json::json!({
                    "id": id,
                    "lang": "en",
                    "fields": {"text": text},
                    "label": label,
                })
                .to_string()
                    + "\n"
            })
            .collect()
    };
    write(&dir.join("test.jsonl"), &jsonl(&test_examples));
    write(&dir.join("train.jsonl"), &jsonl(&train_examples));

    let task_path = dir.join("task.json");
    write(
        &task_path,
        &serde_json::json!({
            "name": "three-class",
            "kind": "classification",
            "metric": "accuracy",
            "label_space": THREE_CLASS_LABELS,
            "languages": [{"code": "en", "resource_level": "high"}],
            "splits": {"train": "train.jsonl", "test": "test.jsonl"},
        })
        .to_string(),
    );

    let template_path = dir.join("tpl_en.json");
    write(
        &template_path,
        &serde_json::json!({
            "task": "three-class",
            "language": "en",
            "patterns": {"*": "{text} -> [Mask]"},
            "verbalizer": {
                "alpha": THREE_CLASS_SURFACES[0],
                "beta": THREE_CLASS_SURFACES[1],
                "gamma": THREE_CLASS_SURFACES[2],
            },
        })
        .to_string(),
    );

    ThreeClassFixture { task_path, template_path, corpus_path, model_path, test_examples }
}

pub struct CrossLingualFixture {
    pub task_path: PathBuf,
    pub template_paths: Vec<PathBuf>,
    pub vi_sentences: Vec<(String, String)>,
}

/// en/vi NLI-shaped task: vi test examples, en train pool, an English
/// template whose literal tokens are ", right? [Mask], ".
pub fn cross_lingual_fixture(dir: &Path) -> CrossLingualFixture {
    let vi_pairs = [
        ("Tôi thích cà phê buổi sáng", "Tôi uống cà phê"),
        ("Trời hôm nay rất đẹp", "Trời đang mưa to"),
        ("Cô ấy đọc sách mỗi tối", "Cô ấy thích đọc sách"),
        ("Chúng tôi đi bộ ra công viên", "Họ ở nhà cả ngày"),
    ];
    let en_pairs = [
        ("The sky is clear today", "It is sunny"),
        ("He reads every night", "He likes books"),
        ("They walked to the park", "They stayed home"),
        ("She drinks coffee", "She avoids coffee"),
    ];
    let labels = ["entailment", "contradiction"];

    let mut test = String::new();
    let mut vi_sentences = Vec::new();
    for (i, (s1, s2)) in vi_pairs.iter().enumerate() {
        let s1 = s1.to_string();
        let s2 = s2.to_string();
        test.push_str(
            &(serde_json::json!({
                "id": format!("vi{i}"),
                "lang": "vi",
                "fields": {"sentence1": s1, "sentence2": s2},
                "label": labels[i % 2],
            })
            .to_string()
                + "\n"),
        );
        vi_sentences.push((s1, s2));
    }
    write(&dir.join("test.jsonl"), &test);

    let mut train = String::new();
    for (i, (s1, s2)) in en_pairs.iter().enumerate() {
        train.push_str(
            &(serde_json::json!({
                "id": format!("en{i}"),
                "lang": "en",
                "fields": {"sentence1": s1, "sentence2": s2},
                "label": labels[i % 2],
            })
            .to_string()
                + "\n"),
        );
    }
    write(&dir.join("train.jsonl"), &train);

    let task_path = dir.join("task.json");
    write(
        &task_path,
        &serde_json::json!({
            "name": "mini-nli",
            "kind": "classification",
            "metric": "accuracy",
            "label_space": ["entailment", "contradiction"],
            "languages": [
                {"code": "en", "resource_level": "high"},
                {"code": "vi", "resource_level": "medium"},
            ],
            "splits": {"train": "train.jsonl", "test": "test.jsonl"},
        })
        .to_string(),
    );

    let verbalizer = serde_json::json!({"entailment": "Yes", "contradiction": "No"});
    let en_tpl = dir.join("tpl_en.json");
    write(
        &en_tpl,
        &serde_json::json!({
            "task": "mini-nli",
            "language": "en",
            "patterns": {"*": "{sentence1}, right? [Mask], {sentence2}"},
            "verbalizer": verbalizer,
        })
        .to_string(),
    );
    let vi_tpl = dir.join("tpl_vi.json");
    write(
        &vi_tpl,
        &serde_json::json!({
            "task": "mini-nli",
            "language": "vi",
            "patterns": {"*": "{sentence1}, đúng không? [Mask], {sentence2}"},
            "verbalizer": {"entailment": "Đúng", "contradiction": "Không"},
        })
        .to_string(),
    );

    CrossLingualFixture { task_path, template_paths: vec![en_tpl, vi_tpl], vi_sentences }
}

/// Tiny generation task: "{source} = [Mask]" with references.
pub fn generation_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let pairs = [
        ("un deux trois", "one two three"),
        ("quatre cinq six", "four five six"),
        ("sept huit neuf", "seven eight nine"),
    ];
    let mut test = String::new();
    for (i, (src, reference)) in pairs.iter().enumerate() {
        test.push_str(
            &(serde_json::json!({
                "id": format!("g{i}"),
                "lang": "fr",
                "fields": {"source": src},
                "reference": reference,
            })
            .to_string()
                + "\n"),
        );
    }
    write(&dir.join("test.jsonl"), &test);
    let task_path = dir.join("task.json");
    write(
        &task_path,
        &serde_json::json!({
            "name": "mini-mt",
            "kind": "generation",
            "metric": "corpus-bleu",
            "languages": [{"code": "fr", "resource_level": "medium"}],
            "splits": {"test": "test.jsonl"},
        })
        .to_string(),
    );
    let template_path = dir.join("tpl_fr.json");
    write(
        &template_path,
        &serde_json::json!({
            "task": "mini-mt",
            "language": "fr",
            "patterns": {"*": "{source} = [Mask]"},
            "verbalizer": "identity",
        })
        .to_string(),
    );
    (task_path, template_path)
}
