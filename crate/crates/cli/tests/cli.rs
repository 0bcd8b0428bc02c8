use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn hicqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hicqa"))
        .args(["--run-dir", dir.to_str().unwrap()])
        .args(args)
        .env("HICQA_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = hicqa(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

/// Synthesizes a small corpus and builds its graph; returns (corpus, graph) paths.
fn pipeline_inputs(dir: &Path) -> (String, String) {
    let corpus = p(dir, "corpus.jsonl");
    let graph = p(dir, "graph.json");
    ok(dir, &["synth", "--n-samples", "40", "--f", "16", "--out", &corpus]);
    ok(dir, &["build", "--corpus", &corpus, "--out", &graph]);
    (corpus, graph)
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.jsonl", "b.jsonl"] {
        ok(d, &["synth", "--n-samples", "25", "--f", "8", "--seed", "3", "--out", &p(d, name)]);
    }
    assert_eq!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(std::fs::read(d.join("a.oracle.json")).unwrap(), std::fs::read(d.join("b.oracle.json")).unwrap());
    ok(d, &["synth", "--n-samples", "25", "--f", "8", "--seed", "4", "--out", &p(d, "c.jsonl")]);
    assert_ne!(std::fs::read(d.join("a.jsonl")).unwrap(), std::fs::read(d.join("c.jsonl")).unwrap());
}

#[test]
fn validate_and_build() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, graph) = pipeline_inputs(d);
    ok(d, &["validate", "--corpus", &corpus, "--report", &p(d, "report.json")]);
    assert_eq!(json(&d.join("report.json"))["errors"].as_array().unwrap().len(), 0);

    let g = json(Path::new(&graph));
    let counts: Vec<usize> =
        g["relations"].as_array().unwrap().iter().map(|r| r["edges"].as_array().unwrap().len()).collect();
    // 40 samples with 3 QAs each: (1, k, k, k(k-1)) per sample
    assert_eq!(counts, vec![40, 120, 120, 240]);

    std::fs::write(d.join("bad.jsonl"), "{\"format\":\"hicqa-corpus\",\"version\":1,\"f\":2}\n{not json}\n").unwrap();
    let out = hicqa(d, &["validate", "--corpus", &p(d, "bad.jsonl")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_score_filter_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, graph) = pipeline_inputs(d);
    let ckpt = p(d, "model.json");
    let train_args = [
        "train",
        "--graph",
        &graph,
        "--out",
        &ckpt,
        "--d",
        "16",
        "--heads",
        "2",
        "--epochs",
        "12",
        "--eval-every",
        "4",
    ];
    ok(d, &train_args);
    let report = std::fs::read_to_string(d.join("model.report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 12);
    assert!(d.join("model.best.json").exists());

    // identical reruns give identical checkpoints and loss sequences
    let first = std::fs::read(&ckpt).unwrap();
    ok(d, &train_args);
    assert_eq!(std::fs::read(&ckpt).unwrap(), first);
    assert_eq!(std::fs::read_to_string(d.join("model.report.jsonl")).unwrap().lines().count(), 12);

    let scores = p(d, "scores.json");
    ok(d, &["score", "--graph", &graph, "--checkpoint", &ckpt, "--out", &scores]);
    assert_eq!(json(Path::new(&scores))["entries"].as_array().unwrap().len(), 120);

    let out_a = d.join("filtered_a");
    let out_b = d.join("filtered_b");
    for out in [&out_a, &out_b] {
        ok(
            d,
            &[
                "filter",
                "--scores",
                &scores,
                "--ratios",
                "0.25,0.5,0.75",
                "--corpus",
                &corpus,
                "--no-timestamp",
                "--out-dir",
                out.to_str().unwrap(),
            ],
        );
    }
    for (ratio, want) in [("0.25", 30), ("0.5", 60), ("0.75", 90)] {
        let name = format!("manifest_{ratio}.json");
        let m = json(&out_a.join(&name));
        assert_eq!(m["kept"].as_array().unwrap().len(), want);
        assert_eq!(m["n_total"], 120);
        assert_eq!(std::fs::read(out_a.join(&name)).unwrap(), std::fs::read(out_b.join(&name)).unwrap());
        let kept_corpus = std::fs::read_to_string(out_a.join(format!("corpus_{ratio}.jsonl"))).unwrap();
        let n_qas: usize = kept_corpus
            .lines()
            .skip(1)
            .map(|l| serde_json::from_str::<Value>(l).unwrap()["qas"].as_array().unwrap().len())
            .sum();
        assert_eq!(n_qas, want);
    }

    let metrics = p(d, "metrics.json");
    ok(
        d,
        &["eval", "--graph", &graph, "--scores", &scores, "--oracle", &p(d, "corpus.oracle.json"), "--out", &metrics],
    );
    let m = json(Path::new(&metrics));
    assert_eq!(m["at_ratio"].as_array().unwrap().len(), 3);
    let auroc = m["auroc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auroc));

    // baselines need no checkpoint
    let nclip = p(d, "nclip.json");
    ok(d, &["score", "--graph", &graph, "--method", "nclip", "--nclip-weight", "0.3", "--out", &nclip]);
    assert_eq!(json(Path::new(&nclip))["params"]["nclip_weight"], 0.3);
}

#[test]
fn score_refuses_a_foreign_checkpoint_unless_forced() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (corpus, graph) = pipeline_inputs(d);
    let ckpt = p(d, "model.json");
    ok(d, &["train", "--graph", &graph, "--out", &ckpt, "--d", "8", "--heads", "2", "--epochs", "1"]);
    let other = p(d, "other.json");
    ok(d, &["build", "--corpus", &corpus, "--alpha", "0.3", "--out", &other]);
    let out = hicqa(d, &["score", "--graph", &other, "--checkpoint", &ckpt, "--out", &p(d, "s.json")]);
    assert_eq!(out.status.code(), Some(1));
    ok(d, &["score", "--graph", &other, "--checkpoint", &ckpt, "--force", "--out", &p(d, "s.json")]);
}

#[test]
fn unknown_flag_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = hicqa(dir.path(), &["synth", "--out", "x.jsonl", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));
    let out = hicqa(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn run_record_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n-samples", "5", "--f", "4", "--seed", "9", "--out", &p(d, "c.jsonl")]);
    let run = json(&d.join("run.json"));
    assert_eq!(run["exit_code"], 0);
    assert_eq!(run["config"]["command"]["subcommand"], "synth");
    assert_eq!(run["config"]["command"]["seed"], 9);

    let missing = hicqa(d, &["build", "--corpus", &p(d, "missing.jsonl"), "--out", &p(d, "g.json")]);
    assert_eq!(missing.status.code(), Some(2));
    let run = json(&d.join("run.json"));
    assert_eq!(run["exit_code"], 2);
    assert!(run["error"].as_str().unwrap().contains("missing.jsonl"));
}

#[test]
fn divergence_exits_three_and_keeps_finite_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, graph) = pipeline_inputs(d);
    let ckpt: PathBuf = d.join("model.json");
    let out = hicqa(
        d,
        &[
            "train",
            "--graph",
            &graph,
            "--out",
            ckpt.to_str().unwrap(),
            "--d",
            "8",
            "--heads",
            "2",
            "--epochs",
            "20",
            "--lr",
            "1e300",
            "--clip-norm",
            "1e300",
        ],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let last = json(&d.join("model.last_finite.json"));
    let finite = last["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|t| t["data"].as_array().unwrap().iter())
        .all(|v| v.as_f64().is_some_and(f64::is_finite));
    assert!(finite);
    assert!(!ckpt.exists());
}

#[test]
fn gradcheck_passes_in_both_precisions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(ok(d, &["gradcheck"]).contains("-> ok"));
    assert!(ok(d, &["gradcheck", "--precision", "single"]).contains("-> ok"));
    let out = hicqa(d, &["gradcheck", "--d", "8", "--heads", "3"]);
    assert_eq!(out.status.code(), Some(1));
}
