mod common;

use std::fs;

use common::*;
use ctxner::evaluation::extract_chunks;
use ctxner::{parse_conll, position_sweep, Label, ParseConfig, WindowConfig};

fn labels(s: &str) -> Vec<Label> {
    s.split_whitespace().map(|l| l.parse().unwrap()).collect()
}

#[test]
fn convert_latin1_iob1_to_utf8_iob2() {
    let dir = tempfile::tempdir().unwrap();
    let gold = "I-PER I-PER B-PER O I-LOC I-ORG";
    let tokens = ["M\u{fc}ller", "Jr", "Hans", "in", "K\u{f6}ln", "AG"];
    let mut bytes: Vec<u8> = Vec::new();
    for (t, l) in tokens.iter().zip(gold.split_whitespace()) {
        bytes.extend(t.chars().map(|c| c as u8));
        bytes.extend(format!(" {l}\n").bytes());
    }
    let input = dir.path().join("in.conll");
    let output = dir.path().join("out.conll");
    fs::write(&input, &bytes).unwrap();

    let out = ctxner(&["convert", s(&input), s(&output), "--encoding", "latin-1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&output).unwrap();
    assert!(text.contains("M\u{fc}ller B-PER\nJr I-PER\nHans B-PER\n"), "{text}");
    let converted: Vec<Label> = text.lines().filter(|l| !l.is_empty()).map(|l| l.split(' ').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(converted, labels("B-PER I-PER B-PER O B-LOC B-ORG"));
    assert_eq!(extract_chunks(&labels(gold)), extract_chunks(&converted));
}

#[test]
fn convert_keeps_iob2_content() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.conll");
    let output = dir.path().join("out.conll");
    fs::write(&input, DEV).unwrap();
    let out = ctxner(&["convert", s(&input), s(&output), "--scheme", "iob2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&output).unwrap(), DEV);

    fs::write(&input, "Anna I-PER\n").unwrap();
    let out = ctxner(&["convert", s(&input), s(&output), "--scheme", "iob2"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("declared IOB2"), "{}", stderr(&out));
}

#[test]
fn malformed_input_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.conll");
    fs::write(&input, "Anna B-PER\nBerg I-PER\nbroken\n").unwrap();
    let out = ctxner(&["convert", s(&input), s(&dir.path().join("o.conll"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    fs::write(&input, b"Anna B-PER\n\xff O\n").unwrap();
    let out = ctxner(&["stats", s(&input)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn stats_as_json() {
    let f = Fixture::new();
    let out = ctxner(&["stats", s(&f.path("dev.conll"))]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["token_count"], 22);
    assert_eq!(v["entity_count"], 7);
    assert_eq!(v["chunk_count"], 7);
    assert_eq!(v["sentence_count"], 4);
    assert_eq!(v["document_count"], 2);
    assert_eq!(v["input_scheme"], "iob2");
    assert_eq!(v["per_type_counts"]["PER"], 3);
}

#[test]
fn usage_errors_exit_1() {
    let f = Fixture::new();
    assert_eq!(code(&ctxner(&["frobnicate"])), 1);
    assert_eq!(code(&ctxner(&["run", "--config", s(&f.path("missing.toml")), "--out", "x"])), 1);
    assert_eq!(code(&ctxner(&["--version"])), 0);

    let cfg = f.mock_config("bad.toml", "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("max_seq_len", "max_len")).unwrap();
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&f.path("out"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("max_len") && stderr(&out).contains("line"), "{}", stderr(&out));
}

#[test]
fn cmv_needs_multi_context_windows() {
    let f = Fixture::new();
    let cfg = f.mock_config("c.toml", "strategies = [\"cmv-vote\"]");
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&f.path("out")), "--window-strategy", "single"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("CMV requires multi-context windows"), "{}", stderr(&out));
}

#[test]
fn unreachable_sidecar_exits_3() {
    let f = Fixture::new();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = f.remote_config("r.toml", &format!("http://127.0.0.1:{port}"), "", "");
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&f.path("out"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn run_writes_reports_and_a_complete_manifest() {
    let f = Fixture::new();
    let cfg = f.mock_config("c.toml", "");
    let out_dir = f.path("out");
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let files = files_under(&out_dir);
    for strategy in ["single", "first", "cmv-vote", "cmv-sum"] {
        assert!(files.contains(&format!("{strategy}/report.json")), "{files:?}");
        for rep in 0..3 {
            for ext in ["conll", "txt", "json"] {
                assert!(files.contains(&format!("{strategy}/rep{rep}.{ext}")));
            }
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    let listed: std::collections::BTreeSet<String> =
        manifest["files"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    let mut produced = files.clone();
    produced.remove("manifest.json");
    assert_eq!(listed, produced);
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["cells"].as_object().unwrap().len(), 12);

    // Resume: only the cell with a missing file is recomputed.
    let kept = out_dir.join("single/rep1.json");
    let stamp = fs::metadata(&kept).unwrap().modified().unwrap();
    let before = fs::read(out_dir.join("cmv-vote/rep2.txt")).unwrap();
    fs::remove_file(out_dir.join("cmv-vote/rep2.txt")).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(out_dir.join("cmv-vote/rep2.txt")).unwrap(), before);
    assert_eq!(fs::metadata(&kept).unwrap().modified().unwrap(), stamp);

    // A different configuration may not reuse the directory.
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&out_dir), "--seed", "12"]);
    assert_eq!(code(&out), 1);
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&out_dir), "--seed", "12", "--fresh"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

fn without_timestamps(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"started_at\"") && !l.contains("\"updated_at\"")).collect::<Vec<_>>().join("\n")
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let f = Fixture::new();
    let cfg = f.mock_config("c.toml", "");
    let (a, b) = (f.path("a"), f.path("b"));
    for dir in [&a, &b] {
        let out = ctxner(&["run", "--config", s(&cfg), "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for file in &files {
        let (x, y) = (fs::read_to_string(a.join(file)).unwrap(), fs::read_to_string(b.join(file)).unwrap());
        if file == "manifest.json" {
            assert_eq!(without_timestamps(&x), without_timestamps(&y));
        } else {
            assert_eq!(x, y, "{file}");
        }
    }
    let c = f.path("c");
    assert_eq!(code(&ctxner(&["run", "--config", s(&cfg), "--out", s(&c), "--seed", "99"])), 0);
    let differs = files.iter().filter(|f| f.ends_with(".conll")).any(|file| {
        fs::read(a.join(file)).unwrap() != fs::read(c.join(file)).unwrap()
    });
    assert!(differs, "a different seed should change some predictions");
}

/// windows -> predict -> aggregate -> eval reproduces the cmv-vote run.
#[test]
fn stepwise_commands_match_run() {
    let f = Fixture::new();
    let cfg = f.mock_config("c.toml", "strategies = [\"cmv-vote\"]\nrepetitions = 1");
    let text = fs::read_to_string(&cfg).unwrap().replace("noise = 0.8", "noise = 0.0").replace("repetitions = 3\n", "");
    fs::write(&cfg, text).unwrap();
    let run_dir = f.path("run");
    let out = ctxner(&["run", "--config", s(&cfg), "--out", s(&run_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let (windows, preds, tagged) = (f.path("w.jsonl"), f.path("p.jsonl"), f.path("tagged.txt"));
    let dev = f.path("dev.conll");
    let vocab = f.path("vocab.txt");
    let out = ctxner(&["windows", "--corpus", s(&dev), "--vocab", s(&vocab), "--out", s(&windows), "--max-seq-len", "16"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&windows).unwrap().lines().count(), 4);
    let out = ctxner(&[
        "predict", "--examples", s(&windows), "--vocab", s(&vocab), "--out", s(&preds),
        "--types", "LOC,ORG,PER", "--gazetteer", s(&f.path("gazetteer.tsv")), "--context-bonus", "2.0",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = ctxner(&[
        "aggregate", "--corpus", s(&dev), "--vocab", s(&vocab), "--examples", s(&windows), "--predictions", s(&preds),
        "--out", s(&tagged), "--types", "LOC,ORG,PER", "--max-seq-len", "16", "--decider", "cmv-vote",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&tagged).unwrap(), fs::read_to_string(run_dir.join("cmv-vote/rep0.conll")).unwrap());

    let json = f.path("report.json");
    let out = ctxner(&["eval", s(&tagged), "--json", s(&json)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out), fs::read_to_string(run_dir.join("cmv-vote/rep0.txt")).unwrap());
    assert_eq!(fs::read_to_string(&json).unwrap(), fs::read_to_string(run_dir.join("cmv-vote/rep0.json")).unwrap());

    let out = ctxner(&["windows", "--corpus", s(&dev), "--vocab", s(&vocab), "--out", s(&windows), "--max-seq-len", "16", "--targets"]);
    assert_eq!(code(&out), 0);
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(&windows).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["weights"][0], 0);
    assert_eq!(first["label_ids"].as_array().unwrap().len(), 16);
}

#[test]
fn aggregate_rejects_mismatched_predictions() {
    let f = Fixture::new();
    let (windows, preds) = (f.path("w.jsonl"), f.path("p.jsonl"));
    let (dev, vocab) = (f.path("dev.conll"), f.path("vocab.txt"));
    assert_eq!(code(&ctxner(&["windows", "--corpus", s(&dev), "--vocab", s(&vocab), "--out", s(&windows), "--max-seq-len", "16"])), 0);
    assert_eq!(
        code(&ctxner(&["predict", "--examples", s(&windows), "--vocab", s(&vocab), "--out", s(&preds), "--gazetteer", s(&f.path("gazetteer.tsv"))])),
        0
    );
    // Default types give 9 labels; asking for 7 must fail.
    let out = ctxner(&[
        "aggregate", "--corpus", s(&dev), "--vocab", s(&vocab), "--examples", s(&windows), "--predictions", s(&preds),
        "--out", s(&f.path("t.txt")), "--types", "LOC,ORG,PER", "--max-seq-len", "16",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("expected 7"), "{}", stderr(&out));
}

#[test]
fn positions_csv_has_one_row_per_start() {
    let f = Fixture::new();
    let cfg = f.mock_config("c.toml", "");
    let out_dir = f.path("pos");
    let out = ctxner(&["positions", "--config", s(&cfg), "--out", s(&out_dir), "--repetitions", "1", "--max-seq-len", "64"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("positions.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("position,mean_f1,stddev,n"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let expected = position_sweep(&WindowConfig { max_seq_len: 64, ..WindowConfig::default() });
    assert_eq!(rows.iter().map(|r| r[0].parse::<usize>().unwrap()).collect::<Vec<_>>(), expected);
    assert!(rows.iter().all(|r| r[2] == "0.0000" && r[3] == "1"));
    assert_eq!(stdout(&out), csv);
}

#[test]
fn synth_writes_a_runnable_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctxner(&["synth", "--out", s(dir.path()), "--documents", "4", "--train-documents", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["dev.conll", "train.conll", "vocab.txt", "gazetteer.tsv", "experiment.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let dev = parse_conll(&fs::read_to_string(dir.path().join("dev.conll")).unwrap(), &ParseConfig::default()).unwrap();
    assert_eq!(dev.documents.len(), 4);
    let run = dir.path().join("run");
    let out = ctxner(&["run", "--config", s(&dir.path().join("experiment.toml")), "--out", s(&run), "--repetitions", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("cmv-vote"));
}
