use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eaft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eaft")).args(args).output().expect("spawn eaft")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TRAIN: &str = r#"{
  "version": "1",
  "model": {"vocab_size": 64, "context_len": 2, "embed_dim": 8, "hidden_dim": 16, "seed": 1},
  "objective": "eaft",
  "steps": 40,
  "batch_size": 16,
  "capture_every": 10,
  "corpus": {"chain": {"domain": {"markov_order": 1}, "sequences": 20, "seq_len": 16}}
}"#;

const PROTOCOL: &str = r#"{
  "version": "1",
  "sizes": {"pretrain": 100, "finetune": 100, "eval_a": 100, "eval_b": 100, "seq_len": 12},
  "training": {"pretrain_steps": 20, "finetune_steps": 4, "rollout_sequences": 4, "probe_sequences": 4,
               "capture_every": 2},
  "objectives": ["ce", "eaft"],
  "seeds": [0, 1, 2]
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = write(dir, "train.json", TRAIN);
    let out = dir.join("run");
    let o = eaft(&["train", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = eaft(&["train", "--config", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(p(&missing)), "{}", stderr(&o));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn minimal_train_writes_three_files_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out = trained(dir.path());
    let mut names: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["model.ckpt", "records.jsonl", "trainlog.csv"]);
    let log = fs::read(out.join("trainlog.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&log).lines().count(), 41);

    let again = dir.path().join("again");
    let cfg = dir.path().join("train.json");
    assert_eq!(code(&eaft(&["train", "--config", p(&cfg), "--out", p(&again)])), 0);
    assert_eq!(log, fs::read(again.join("trainlog.csv")).unwrap());
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());
    // overwrite semantics: a rerun into the same dir leaves the same bytes
    assert_eq!(code(&eaft(&["train", "--config", p(&cfg), "--out", p(&out)])), 0);
    assert_eq!(log, fs::read(out.join("trainlog.csv")).unwrap());
}

#[test]
fn train_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (TRAIN.replace("\"steps\"", "\"stepz\""), "stepz"),
        (TRAIN.replace("\"eaft\"", "\"xent\""), "xent"),
        (TRAIN.replace("\"version\": \"1\"", "\"version\": \"0\""), "version"),
        (
            TRAIN.replace(
                r#"{"chain": {"domain": {"markov_order": 1}, "sequences": 20, "seq_len": 16}}"#,
                r#"{"path": "nope.jsonl"}"#,
            ),
            "nope.jsonl",
        ),
    ];
    for (text, needle) in cases {
        let cfg = write(dir.path(), "bad.json", &text);
        let o = eaft(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
        assert_eq!(code(&o), 1, "{needle}");
        assert!(stderr(&o).contains(needle), "{needle}: {}", stderr(&o));
    }
}

#[test]
fn train_from_corpus_file_and_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let first = trained(dir.path());
    let corpus = write(dir.path(), "corpus.jsonl", "[1,2,3,4,5,6]\n[7,8,9,10]\n");
    let cfg = format!(
        r#"{{"version": "1", "objective": {{"gate": {{"kind": "power", "p_exponent": 2}}}},
            "steps": 5, "batch_size": 4, "corpus": {{"path": "corpus.jsonl"}}, "init": "{}"}}"#,
        p(&first.join("model.ckpt"))
    );
    let cfg = write(dir.path(), "second.json", &cfg);
    let o = eaft(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("second"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(corpus.exists());
}

#[test]
fn unwritable_out_dir_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.json", TRAIN);
    let blocker = write(dir.path(), "file", "");
    let o = eaft(&["train", "--config", p(&cfg), "--out", p(&blocker.join("sub"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bench_grid_writes_a_file_per_cell_plus_report() {
    let dir = tempfile::tempdir().unwrap();
    let proto = write(dir.path(), "proto.json", PROTOCOL);
    let out = dir.path().join("b");
    let o = eaft(&["bench", "--protocol", p(&proto), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_dir(out.join("cells")).unwrap().count(), 6);
    assert!(out.join("cells/cell_eaft_seed2.json").is_file());
    let pareto = fs::read_to_string(out.join("pareto.csv")).unwrap();
    assert_eq!(pareto.lines().count(), 3);
    assert!(out.join("gap.csv").is_file() && out.join("cells.csv").is_file());
    assert_eq!(fs::read_dir(out.join("captures")).unwrap().count(), 6);
}

#[test]
fn bench_output_does_not_depend_on_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let proto = write(dir.path(), "proto.json", PROTOCOL);
    let (a, b) = (dir.path().join("p1"), dir.path().join("p8"));
    assert_eq!(code(&eaft(&["bench", "--protocol", p(&proto), "--out", p(&a), "--parallel", "1"])), 0);
    assert_eq!(code(&eaft(&["bench", "--protocol", p(&proto), "--out", p(&b), "--parallel", "8"])), 0);
    for f in ["pareto.csv", "cells.csv", "gap.csv", "cells/cell_ce_seed1.json", "trainlogs/trainlog_eaft_seed0.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bench_unknown_objective_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let proto = write(dir.path(), "proto.json", &PROTOCOL.replace("\"eaft\"", "\"eaft-turbo\""));
    let o = eaft(&["bench", "--protocol", p(&proto), "--out", p(&dir.path().join("b"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("eaft-turbo"), "{}", stderr(&o));
    let o = eaft(&["bench", "--protocol", p(&proto), "--out", p(&dir.path().join("b")), "--parallel", "0"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn analyze_needs_exactly_one_source() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let rec = run.join("records.jsonl");
    let out = dir.path().join("a");
    let both = eaft(&["analyze", "--records", p(&rec), "--checkpoint", p(&run.join("model.ckpt")), "--out", p(&out)]);
    assert_eq!(code(&both), 1);
    assert_eq!(code(&eaft(&["analyze", "--out", p(&out)])), 1);
    assert_eq!(code(&eaft(&["analyze", "--checkpoint", p(&run.join("model.ckpt")), "--out", p(&out)])), 1);
    assert!(!out.exists());
}

#[test]
fn analyze_records_without_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let out = dir.path().join("a");
    let o = eaft(&["analyze", "--records", p(&run.join("records.jsonl")), "--bins", "8", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let land = fs::read_to_string(out.join("landscape.csv")).unwrap();
    assert_eq!(land.lines().count(), 1 + 64);
    let quads = fs::read_to_string(out.join("quadrants.csv")).unwrap();
    assert_eq!(quads.lines().count(), 5);
    assert!(quads.lines().nth(1).unwrap().starts_with("confident-conflict,"));
    assert!(out.join("ranking.csv").is_file());
}

#[test]
fn analyze_scores_a_corpus_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let corpus = write(dir.path(), "c.jsonl", "[1,2,3,4,5,6,7,8]\n[9,10,11,12]\n");
    let out = dir.path().join("a");
    let o = eaft(&[
        "analyze",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--corpus",
        p(&corpus),
        "--entropy-axis",
        "gate",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let quads = fs::read_to_string(out.join("quadrants.csv")).unwrap();
    let total: usize = quads.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 6 + 2);
}

#[test]
fn topk_study_synthetic_default_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    let o = eaft(&["topk-study", "--synthetic", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("fidelity.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let ks: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(ks, ["1", "2", "5", "10", "20", "50", "100", "4096"]);
    let r_v: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert!((r_v - 1.0).abs() < 1e-12);
    let k20 = &rows[4];
    assert!(k20[1].parse::<f64>().unwrap() >= 0.99);
    assert_eq!(k20[2], "240");
}

#[test]
fn topk_study_source_rules() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k");
    assert_eq!(code(&eaft(&["topk-study", "--out", p(&out)])), 1);
    assert_eq!(code(&eaft(&["topk-study", "--synthetic", "--k-grid", "0,5", "--out", p(&out)])), 1);
    let run = trained(dir.path());
    let ckpt = run.join("model.ckpt");
    let small = write(dir.path(), "small.jsonl", "[1,2,3,4,5,6,7,8]\n");
    let o = eaft(&["topk-study", "--checkpoint", p(&ckpt), "--corpus", p(&small), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("1000"), "{}", stderr(&o));
    let line: Vec<String> = (0..30).map(|t| (t % 64).to_string()).collect();
    let corpus = write(dir.path(), "c.jsonl", &format!("[{}]\n", line.join(",")).repeat(40));
    let o = eaft(&[
        "topk-study",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--corpus",
        p(&corpus),
        "--k-grid",
        "1,20,64",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("fidelity.csv")).unwrap().lines().count(), 4);
}

#[test]
fn dynamics_from_a_capture_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let out = dir.path().join("d");
    let o = eaft(&["dynamics", "--records", p(&run), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(out.join("dynamics_records.csv")).unwrap();
    // captures at steps 0, 10, 20, 30
    assert_eq!(text.lines().count(), 5);
    // an untrained V = 64 model is near-uniform: nothing sits below 0.5 nats
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(&first[3..], ["", "0"]);
}

#[test]
fn dynamics_rejects_bad_thresholds_and_missing_captures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = eaft(&["dynamics", "--records", p(&empty), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no captured records"));
    let run = trained(dir.path());
    let o = eaft(&["dynamics", "--records", p(&run), "--hi", "0.5", "--lo", "0.5", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    // records without a step are not captures
    let unstepped = write(
        dir.path(),
        "x.jsonl",
        r#"{"source_id":"a","position":0,"token_id":1,"p_target":0.5,"entropy_full":1.0,"entropy_topk":1.0,"gate":0.5}"#,
    );
    assert_eq!(code(&eaft(&["dynamics", "--records", p(&unstepped), "--out", p(&out)])), 1);
    assert!(!out.exists());
}
