use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pagesum::model::{save_checkpoint, ModelConfig, ModelParameters};

fn pagesum(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pagesum"))
        .args(args)
        .current_dir(dir)
        .env_remove("PAGESUM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const WORDS: [&str; 12] = [
    "apple", "river", "stone", "cloud", "maple", "tiger", "lemon", "piano", "ocean", "candle",
    "forest", "silver",
];

fn sentence(seed: usize, k: usize) -> String {
    let words: Vec<&str> = (0..5)
        .map(|i| WORDS[(seed * 7 + k * 5 + i * 3) % WORDS.len()])
        .collect();
    format!("{}.", words.join(" "))
}

fn write_corpus(dir: &Path) {
    let mut train = String::new();
    for d in 0..5 {
        let s: Vec<String> = (0..4).map(|k| sentence(d, k)).collect();
        let line = serde_json::json!({"id": format!("d{d}"), "text": s.join(" "), "summary": format!("{} {}", s[0], s[2])});
        train.push_str(&format!("{line}\n"));
    }
    fs::write(dir.join("train.jsonl"), &train).unwrap();
    fs::write(dir.join("valid.jsonl"), train.lines().next().unwrap()).unwrap();
    fs::write(
        dir.join("cfg.json"),
        r#"{"epochs": 2, "warmup": 10, "base_lr": 0.01}"#,
    )
    .unwrap();
}

#[test]
fn train_summarize_evaluate_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_corpus(dir);
    let train = [
        "train",
        "--config",
        "cfg.json",
        "--corpus",
        "train.jsonl",
        "--valid",
        "valid.jsonl",
        "--checkpoint-dir",
        "ck",
        "--page-size",
        "16",
        "--seed",
        "4",
    ];
    let a = pagesum(&train, dir);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(dir.join("ck/best.pgsm").exists() && dir.join("ck/epoch-001.pgsm").exists());
    let report: serde_json::Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 10);
    let first = fs::read(dir.join("ck/epoch-001.pgsm")).unwrap();

    let b = pagesum(&train, dir);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(first, fs::read(dir.join("ck/epoch-001.pgsm")).unwrap());

    let s = pagesum(
        &[
            "summarize",
            "--checkpoint",
            "ck/best.pgsm",
            "--corpus",
            "valid.jsonl",
            "--page-size",
            "16",
            "--max-len",
            "6",
            "--strategy",
            "beam",
            "--beam-size",
            "2",
            "--out",
            "hyp.jsonl",
        ],
        dir,
    );
    assert!(s.status.success(), "{}", stderr(&s));
    assert!(stdout(&s).is_empty());
    let hyp = fs::read_to_string(dir.join("hyp.jsonl")).unwrap();
    assert!(hyp.starts_with("{\"id\":\"d0\""));

    let e = pagesum(
        &["eval-rouge", "--hyp", "hyp.jsonl", "--ref", "valid.jsonl"],
        dir,
    );
    assert!(e.status.success(), "{}", stderr(&e));
    let scores: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert_eq!(scores["documents"], 1);
    assert!(scores["rougeL"]["f1"].as_f64().unwrap() >= 0.0);

    let imp = pagesum(
        &[
            "analyze",
            "importance",
            "--checkpoint",
            "ck/best.pgsm",
            "--corpus",
            "train.jsonl",
            "--doc",
            "d2",
            "--page-size",
            "8",
        ],
        dir,
    );
    assert!(imp.status.success(), "{}", stderr(&imp));
    assert!(stdout(&imp).starts_with("step,page_0,page_1"));
}

#[test]
fn fusion_finds_constructed_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let sentences: Vec<String> = (0..10)
        .map(|i| format!("alpha{i} beta{i} gamma{i} delta{i}."))
        .collect();
    let summary =
        "alpha3 beta3 gamma3 delta3 alpha9 beta9 gamma9 delta9. alpha4 beta4 gamma4 delta4.";
    let line = serde_json::json!({"id": "x", "text": sentences.join(" "), "summary": summary});
    fs::write(tmp.path().join("c.jsonl"), format!("{line}\n")).unwrap();
    let o = pagesum(
        &[
            "analyze", "fusion", "--corpus", "c.jsonl", "--t1", "20", "--t2", "10",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    // The shared full stop makes each source cover 5 of 9 reference tokens.
    assert_eq!(
        stdout(&o),
        "doc_id,summary_idx,src_i,src_j,score,gain,norm_dist\nx,0,3,9,100,44.44444444444444,0.6\n"
    );
    let h = pagesum(
        &["analyze", "fusion", "--corpus", "c.jsonl", "--histogram"],
        tmp.path(),
    );
    assert!(stdout(&h).contains("0.6,0.7,1\n"));
}

#[test]
fn memory_bench_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = pagesum(
        &[
            "bench",
            "memory",
            "--lengths",
            "1024,2048,4096",
            "--page-size",
            "1024",
            "--mode",
            "paged,full",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("l_D,mode,entries,bound\n"));
    assert!(text.contains("4096,paged,4194304,4194304\n"));
    assert!(text.contains("4096,full,16777216,16777216\n"));
}

#[test]
fn analyses_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(tmp.path());
    for args in [
        &[
            "analyze",
            "locality",
            "--corpus",
            "train.jsonl",
            "--max-distance",
            "3",
        ][..],
        &["analyze", "coherence", "--corpus", "train.jsonl"][..],
    ] {
        let a = pagesum(args, tmp.path());
        assert!(a.status.success(), "{}", stderr(&a));
        assert_eq!(a.stdout, pagesum(args, tmp.path()).stdout);
    }
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["check", "grads", "--samples", "2"];
    let explicit = pagesum(&[&args[..], &["--seed", "9"]].concat(), tmp.path());
    let env = Command::new(env!("CARGO_BIN_EXE_pagesum"))
        .args(args)
        .env("PAGESUM_SEED", "9")
        .output()
        .unwrap();
    assert!(explicit.status.success());
    assert_eq!(explicit.stdout, env.stdout);
    assert_ne!(explicit.stdout, pagesum(&args, tmp.path()).stdout);
}

fn assert_one_line_error(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "{}", stderr(o));
    let err = stderr(o);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    assert_one_line_error(&pagesum(&["frobnicate"], dir), 1);
    assert!(stderr(&pagesum(&["frobnicate"], dir)).contains("Usage:"));
    assert_eq!(pagesum(&["--help"], dir).status.code(), Some(0));
    assert_eq!(
        pagesum(&["analyze", "fusion", "--help"], dir).status.code(),
        Some(0)
    );

    fs::write(dir.join("bad.jsonl"), "{not json\n").unwrap();
    let o = pagesum(&["analyze", "fusion", "--corpus", "bad.jsonl"], dir);
    assert_one_line_error(&o, 1);
    assert_eq!(stderr(&o).lines().count(), 1);

    let mut params = ModelParameters::init(&ModelConfig::tiny(), 0).unwrap();
    params.get_mut("head.vocab").unwrap().data_mut()[3] = f32::NAN;
    save_checkpoint(&dir.join("nan.pgsm"), &params).unwrap();
    let vocab: Vec<String> = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"]
        .iter()
        .map(|s| s.to_string())
        .chain((5..64).map(|i| format!("w{i}")))
        .collect();
    fs::write(
        dir.join("vocab.json"),
        serde_json::to_string(&vocab).unwrap(),
    )
    .unwrap();
    fs::write(
        dir.join("c.jsonl"),
        "{\"id\":\"a\",\"text\":\"w5 w6 w7.\",\"summary\":\"w5.\"}\n",
    )
    .unwrap();
    let o = pagesum(
        &[
            "summarize",
            "--checkpoint",
            "nan.pgsm",
            "--corpus",
            "c.jsonl",
            "--page-size",
            "16",
        ],
        dir,
    );
    assert_one_line_error(&o, 2);

    let o = pagesum(
        &["check", "grads", "--samples", "2", "--tolerance", "0"],
        dir,
    );
    assert_one_line_error(&o, 3);

    let o = pagesum(&["bench", "memory", "--mode", "sideways"], dir);
    assert_one_line_error(&o, 1);
    assert_eq!(stderr(&o).lines().count(), 1);
}
