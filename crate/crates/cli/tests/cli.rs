use std::path::Path;
use std::process::{Command, Output};

fn emograce(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emograce"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FIXTURE: &str = r#"{"id":"d1","annotator":"a","text":"I love the park.","labels":[[11,15,"Happiness"]]}
{"id":"d1","annotator":"b","text":"I love the park.","labels":[[7,15,"Happiness"]]}
{"id":"d1","annotator":"c","text":"I love the park.","labels":[[11,16,"Sadness"]]}
{"id":"d2","annotator":"a","text":"Rain again.","labels":[]}
{"id":"d2","annotator":"b","text":"Rain again.","labels":[]}
{"id":"d2","annotator":"c","text":"Rain again.","labels":[[0,4,"Sadness"]]}
"#;

const TEMPLATES: [(&str, &str, &str); 4] = [
    ("I love ", ".", "Happiness"),
    ("I hate ", ".", "Anger"),
    ("I miss ", " so much.", "Sadness"),
    ("I am scared of ", ".", "Fear"),
];
const ASPECTS: [&str; 8] = ["you", "the park", "my dog", "this city", "the rain", "our teacher", "the music", "her smile"];

fn templated_annotations() -> String {
    let mut out = String::new();
    for (t, (pre, post, emotion)) in TEMPLATES.iter().enumerate() {
        for (a, aspect) in ASPECTS.iter().enumerate() {
            let text = format!("{pre}{aspect}{post}");
            let start = pre.chars().count();
            let end = start + aspect.chars().count();
            for ann in ["a", "b", "c"] {
                out.push_str(&format!(
                    "{{\"id\":\"t{t}-{a}\",\"annotator\":\"{ann}\",\"text\":\"{text}\",\"labels\":[[{start},{end},\"{emotion}\"]]}}\n"
                ));
            }
        }
    }
    out
}

#[test]
fn aggregate_writes_corpus_and_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("raw.jsonl"), FIXTURE).unwrap();
    let o = emograce(
        &["aggregate", "--in", "raw.jsonl", "--out", "corpus.jsonl", "--report", "iaa.json", "--review", "review.jsonl"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let corpus = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = corpus.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["spans"], serde_json::json!([{"start": 11, "end": 15, "emotion": "Happiness"}]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("iaa.json")).unwrap()).unwrap();
    assert_eq!(report["docs_total"], 2);
    assert!(dir.path().join("review.jsonl").exists());
}

#[test]
fn split_rejects_ratios_not_summing_to_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.jsonl"), "").unwrap();
    let o = emograce(&["split", "--in", "corpus.jsonl", "--ratios", "0.7,0.1,0.3"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ratios must sum to 1"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(emograce(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(emograce(&["stats", "--in", "x", "--bogus"], dir.path()).status.code(), Some(2));
}

#[test]
fn invalid_input_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("raw.jsonl"),
        "{\"id\":\"d\",\"annotator\":\"a\",\"text\":\"hi\",\"labels\":[]}\nnot json\n",
    )
    .unwrap();
    let o = emograce(&["aggregate", "--in", "raw.jsonl", "--out", "c", "--report", "r", "--review", "v"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("raw.jsonl:2:"), "{}", stderr(&o));
    assert!(!dir.path().join("c").exists());
}

/// aggregate → split → stats → train → eval → predict in `dir`.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("raw.jsonl"), templated_annotations()).unwrap();
    let steps: [&[&str]; 5] = [
        &["aggregate", "--in", "raw.jsonl", "--out", "corpus.jsonl", "--report", "iaa.json", "--review", "review.jsonl"],
        &["split", "--in", "corpus.jsonl", "--ratios", "1,0,0", "--seed", "7", "--out-dir", "data"],
        &["stats", "--in", "corpus.jsonl"],
        &["train", "--config", "tiny.toml", "--data", "data", "--out", "model.ckpt", "--log", "train.jsonl"],
        &["eval", "--model", "model.ckpt", "--data", "corpus.jsonl", "--report", "report.json"],
    ];
    let mut config = emograce::trainer::RunConfig::tiny().to_toml_string();
    config.push('\n');
    std::fs::write(dir.join("tiny.toml"), config).unwrap();
    // Validation on the training set itself.
    let mut outputs = Vec::new();
    for (i, args) in steps.iter().enumerate() {
        if i == 3 {
            std::fs::copy(dir.join("data/train.jsonl"), dir.join("data/val.jsonl")).unwrap();
        }
        let o = emograce(args, dir);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        outputs.push((args[0].to_string(), o.stdout));
    }
    for f in ["corpus.jsonl", "iaa.json", "data/train.jsonl", "model.ckpt", "train.jsonl", "report.json"] {
        outputs.push((f.to_string(), std::fs::read(dir.join(f)).unwrap()));
    }
    outputs
}

#[test]
fn pipeline_trains_predicts_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let x = pipeline(a.path());
    let y = pipeline(b.path());
    for (p, q) in x.iter().zip(&y) {
        assert!(p.1 == q.1, "{} differs between runs", p.0);
    }

    let o = emograce(&["predict", "--model", "model.ckpt", "--text", "I love you."], a.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), "(7,10) Happiness\n");

    let stats: serde_json::Value = serde_json::from_slice(&x[2].1).unwrap();
    assert_eq!(stats["documents"], 32);
    let table = String::from_utf8_lossy(&x[4].1);
    assert!(!table.is_empty());
}
