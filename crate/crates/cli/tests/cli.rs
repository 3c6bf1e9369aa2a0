use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use seqdenoise::synth::{bio_chain, SourceChannel, SynthConfig};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_seqdenoise"));
    cmd.env_remove("SEQDENOISE_SEED");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn channel(name: &str, recall: f64, precision: f64) -> SourceChannel {
    SourceChannel {
        name: name.into(),
        recall: vec![recall],
        precision: vec![precision],
        confusion: Vec::new(),
        confusion_rate: Vec::new(),
        boundary: Vec::new(),
        truncate: vec![0.2],
        token_noise: Vec::new(),
    }
}

/// Writes a small synthetic config and generates it into `dir/data`.
fn small_data(dir: &Path, seed: u64) -> PathBuf {
    let config = SynthConfig {
        entity_types: vec!["PER".into(), "LOC".into()],
        n_train: 80,
        n_dev: 20,
        n_test: 20,
        min_len: 5,
        max_len: 10,
        transition: bio_chain(&[0.5, 0.5], 0.2, 0.5),
        n_domains: 2,
        sources: vec![channel("a", 0.7, 0.9), channel("b", 0.5, 0.8), channel("c", 0.6, 0.95)],
        emb_dim: 6,
        class_strength: 1.0,
        type_strength: 0.5,
        context_strength: 0.3,
        domain_strength: 0.5,
        noise: 0.5,
        seed,
    };
    let path = dir.join("synth.json");
    fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--config", s(&path), "--out-dir", s(&data)]);
    data
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn eval_of_identical_files_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path(), 1);
    let corpus = data.join("corpus.jsonl");
    let out = ok(&["eval", "--pred", s(&corpus), "--gold", s(&corpus)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["f1"], 1.0);
    assert_eq!(report["precision"], 1.0);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = run(&["train-hmm", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--pred", "a", "--gold", "b", "--bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_line_with_a_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["baseline-mv", "--corpus", "/nonexistent.jsonl", "--out-dir", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[load]:"), "{err}");

    // the CHMM needs embeddings
    let data = small_data(tmp.path(), 2);
    let out = run(&["train-chmm", "--corpus", s(&data.join("corpus.jsonl")), "--out-dir", s(&tmp.path().join("c"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[load]:"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path();
    let synth = |dir: &str, seed: Option<&str>, env: Option<&str>| {
        let mut cmd = bin();
        cmd.args(["synth", "--out-dir", s(&path.join(dir))]);
        if let Some(v) = seed {
            cmd.args(["--seed", v]);
        }
        if let Some(v) = env {
            cmd.env("SEQDENOISE_SEED", v);
        }
        assert!(cmd.status().unwrap().success());
        fs::read(path.join(dir).join("corpus.jsonl")).unwrap()
    };
    let flag = synth("flag", Some("3"), None);
    let env = synth("env", None, Some("3"));
    let other = synth("other", None, Some("4"));
    // the flag wins over the environment
    let both = synth("both", Some("3"), Some("4"));
    assert!(flag == env && flag == both);
    assert!(flag != other);
    assert_eq!(json(&path.join("env/config.json"))["config"]["seed"], 3);
}

#[test]
fn every_subcommand_writes_config_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = small_data(root, 5);
    let (corpus, emb) = (data.join("corpus.jsonl"), data.join("embeddings.emb"));
    let (corpus, emb) = (s(&corpus), s(&emb));
    let dir = |name: &str| root.join(name);
    let check = |d: &Path, command: &str| {
        assert_eq!(json(&d.join("config.json"))["command"], command);
        assert!(d.join("metrics.json").exists());
    };

    ok(&["baseline-mv", "--corpus", corpus, "--out-dir", s(&dir("mv"))]);
    check(&dir("mv"), "baseline-mv");
    ok(&["baseline-consensus", "--corpus", corpus, "--out-dir", s(&dir("bc"))]);
    check(&dir("bc"), "baseline-consensus");
    assert_eq!(json(&dir("bc/metrics.json"))["scores"]["test"]["precision"], 1.0);

    ok(&["train-hmm", "--corpus", corpus, "--out-dir", s(&dir("hmm")), "--epochs", "3"]);
    check(&dir("hmm"), "train-hmm");
    assert_eq!(json(&dir("hmm/config.json"))["config"]["epochs"], 3);

    let chmm_args = ["train-chmm", "--corpus", corpus, "--embeddings", emb, "--reference", "--epochs", "3", "--seed", "2"];
    ok(&[&chmm_args[..], &["--out-dir", s(&dir("chmm"))]].concat());
    check(&dir("chmm"), "train-chmm");
    let resolved = json(&dir("chmm/config.json"));
    assert_eq!(resolved["config"]["lr"], 0.2);
    assert_eq!(resolved["config"]["seed"], 2);
    // a run is reproducible from its resolved config
    let config_file = root.join("chmm-config.json");
    fs::write(&config_file, resolved["config"].to_string()).unwrap();
    ok(&["train-chmm", "--corpus", corpus, "--embeddings", emb, "--config", s(&config_file), "--out-dir", s(&dir("chmm2"))]);
    assert!(fs::read(dir("chmm/chmm.sdnet")).unwrap() == fs::read(dir("chmm2/chmm.sdnet")).unwrap());

    for (kind, model) in [("chmm", dir("chmm/chmm.sdnet")), ("hmm", dir("hmm/hmm.json"))] {
        let out = dir(&format!("decode-{kind}"));
        ok(&["decode", "--kind", kind, "--model", s(&model), "--corpus", corpus, "--embeddings", emb, "--out-dir", s(&out)]);
        check(&out, "decode");
    }
    // decoding reproduces the training run's output
    assert!(fs::read(dir("decode-chmm/denoised.jsonl")).unwrap() == fs::read(dir("chmm/denoised.jsonl")).unwrap());
    assert!(fs::read(dir("decode-hmm/denoised.jsonl")).unwrap() == fs::read(dir("hmm/denoised.jsonl")).unwrap());

    let denoised = dir("chmm/denoised.jsonl");
    ok(&["train-refiner", "--corpus", s(&denoised), "--embeddings", emb, "--epochs", "3", "--hidden", "8", "--out-dir", s(&dir("ref"))]);
    check(&dir("ref"), "train-refiner");
    ok(&["predict-refiner", "--model", s(&dir("ref/refiner.sdnet")), "--corpus", corpus, "--embeddings", emb, "--out-dir", s(&dir("pred"))]);
    check(&dir("pred"), "predict-refiner");

    // the refiner needs soft labels
    let out = run(&["train-refiner", "--corpus", corpus, "--embeddings", emb, "--out-dir", s(&dir("bad"))]);
    assert_eq!(out.status.code(), Some(1));

    // scoring the written output agrees with the run's own metrics
    let out = ok(&["eval", "--pred", s(&dir("pred/denoised.jsonl")), "--gold", corpus, "--split", "test"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, json(&dir("pred/metrics.json"))["scores"]["test"]);
}

#[test]
fn synth_alt_eval_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut runs = Vec::new();
    for name in ["one", "two"] {
        let base = root.join(name);
        fs::create_dir_all(&base).unwrap();
        let data = small_data(&base, 8);
        let chmm = seqdenoise::chmm::ChmmConfig { epochs: 3, ..seqdenoise::chmm::ChmmConfig::reference(0) };
        let refiner = seqdenoise::refiner::RefinerConfig { epochs: 5, hidden: 8, ..Default::default() };
        let config = seqdenoise::alt::AltConfig { chmm, refiner, max_loops: 3, ..Default::default() };
        fs::write(base.join("alt.json"), serde_json::to_string(&config).unwrap()).unwrap();
        // relative paths keep the recorded config identical across roots
        let in_base = |args: &[&str]| {
            let out = bin().current_dir(&base).args(args).output().unwrap();
            assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            out
        };
        let data_args = ["--corpus", "data/corpus.jsonl", "--embeddings", "data/embeddings.emb"];
        in_base(&[&["alt"], &data_args[..], &["--config", "alt.json", "--seed", "8", "--out-dir", "run"]].concat());
        let out = in_base(&["eval", "--pred", "run/denoised.jsonl", "--gold", "data/corpus.jsonl", "--split", "test"]);
        let run_dir = base.join("run");
        let table = json(&run_dir.join("metrics.json"));
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["f1"], table["best"]["test_f1"]);
        assert!(run_dir.join("loop-00/chmm.sdnet").exists() && run_dir.join("config.json").exists());
        runs.push((files(&data), files(&run_dir), out.stdout));
    }
    assert!(runs[0] == runs[1]);
}

#[test]
fn synth_alt_eval_pipeline_completes_on_the_reference_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run_dir) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&["synth", "--seed", "0", "--out-dir", s(&data)]);
    let metrics = json(&data.join("metrics.json"));
    assert_eq!(metrics["sentences"]["train"], 2000);
    ok(&[
        "alt",
        "--reference",
        "--corpus",
        s(&data.join("corpus.jsonl")),
        "--embeddings",
        s(&data.join("embeddings.emb")),
        "--seed",
        "0",
        "--out-dir",
        s(&run_dir),
    ]);
    let table = json(&run_dir.join("metrics.json"));
    let out = ok(&["eval", "--pred", s(&run_dir.join("denoised.jsonl")), "--gold", s(&data.join("corpus.jsonl")), "--split", "test"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["f1"], table["best"]["test_f1"]);
    assert!(report["f1"].as_f64().unwrap() > 0.5);
}
