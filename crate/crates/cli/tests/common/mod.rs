#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lateqa"));
    cmd.env_remove("LATEQA_DATA_DIR").env_remove("RUST_LOG");
    cmd
}

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy")
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

/// Every regular file under `dir`, keyed by relative path.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every subcommand once on the bundled fixture, chaining outputs,
/// with the given seed and thread count. Each step writes to its own
/// directory under `root`. Returns the step names in order.
pub fn run_all_subcommands(root: &Path, seed: u64, threads: usize) -> Vec<&'static str> {
    let fx = fixture();
    let corpus = fx.join("corpus.tsv");
    let train = fx.join("train.jsonl");
    let dev = fx.join("dev.jsonl");
    let p = |s: &str| root.join(s).display().to_string();
    let c = corpus.display().to_string();
    let t = train.display().to_string();
    let d = dev.display().to_string();
    let seed = seed.to_string();
    let threads = threads.to_string();
    let steps: Vec<(&'static str, Vec<String>)> = vec![
        ("index", vec!["index".into(), "--corpus".into(), c.clone()]),
        (
            "index_clustered",
            vec![
                "index".into(),
                "--corpus".into(),
                c.clone(),
                "--clusters".into(),
                "8".into(),
            ],
        ),
        (
            "retrieve",
            vec![
                "retrieve".into(),
                "--index".into(),
                p("index"),
                "--dataset".into(),
                t.clone(),
                "--k".into(),
                "100".into(),
            ],
        ),
        (
            "retrieve_candidates",
            vec![
                "retrieve".into(),
                "--index".into(),
                p("index_clustered"),
                "--dataset".into(),
                t.clone(),
                "--k".into(),
                "50".into(),
                "--candidates".into(),
                "--fanout".into(),
                "16".into(),
                "--probe".into(),
                "2".into(),
            ],
        ),
        (
            "rerank",
            vec![
                "rerank".into(),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
                "--ranking".into(),
                p("retrieve/ranking.tsv"),
                "--depth".into(),
                "40".into(),
                "--k".into(),
                "40".into(),
            ],
        ),
        (
            "bm25_index",
            vec!["bm25-index".into(), "--corpus".into(), c.clone()],
        ),
        (
            "bm25_retrieve",
            vec![
                "bm25-retrieve".into(),
                "--index".into(),
                p("bm25_index/bm25.json"),
                "--dataset".into(),
                t.clone(),
                "--k".into(),
                "100".into(),
            ],
        ),
        (
            "triples",
            vec![
                "triples".into(),
                "--ranking".into(),
                p("retrieve/ranking.tsv"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
            ],
        ),
        (
            "gold_triples",
            vec![
                "gold-triples".into(),
                "--ranking".into(),
                p("retrieve/ranking.tsv"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
            ],
        ),
        (
            "train_retriever",
            vec![
                "train-retriever".into(),
                "--triples".into(),
                p("triples/triples.tsv"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
                "--max-steps".into(),
                "30".into(),
            ],
        ),
        (
            "train_reader",
            vec![
                "train-reader".into(),
                "--triples".into(),
                p("triples/triples.tsv"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
                "--checkpoint".into(),
                p("train_retriever/checkpoint"),
                "--max-steps".into(),
                "30".into(),
                "--hidden-dim".into(),
                "16".into(),
            ],
        ),
        (
            "predict",
            vec![
                "predict".into(),
                "--ranking".into(),
                p("retrieve/ranking.tsv"),
                "--reader".into(),
                p("train_reader/reader.json"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
                "--checkpoint".into(),
                p("train_retriever/checkpoint"),
            ],
        ),
        (
            "eval_retrieval",
            vec![
                "eval-retrieval".into(),
                "--ranking".into(),
                p("retrieve/ranking.tsv"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
            ],
        ),
        (
            "eval_qa",
            vec![
                "eval-qa".into(),
                "--predictions".into(),
                p("predict/predictions.jsonl"),
                "--dataset".into(),
                t.clone(),
            ],
        ),
        (
            "compare",
            vec![
                "compare".into(),
                "--a".into(),
                p("retrieve/ranking.tsv"),
                "--b".into(),
                p("bm25_retrieve/ranking.tsv"),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
            ],
        ),
        (
            "pipeline",
            vec![
                "pipeline".into(),
                "--corpus".into(),
                c.clone(),
                "--dataset".into(),
                t.clone(),
                "--dev".into(),
                d.clone(),
                "--stages".into(),
                "0,1,2".into(),
                "--max-steps".into(),
                "30".into(),
                "--k".into(),
                "100".into(),
            ],
        ),
        (
            "synth",
            vec![
                "synth".into(),
                "--train-questions".into(),
                "10".into(),
                "--dev-questions".into(),
                "5".into(),
            ],
        ),
    ];
    let mut names = Vec::new();
    for (name, mut args) in steps {
        args.extend([
            "--out".into(),
            p(name),
            "--seed".into(),
            seed.clone(),
            "--threads".into(),
            threads.clone(),
        ]);
        let out = bin().args(&args).output().expect("binary runs");
        assert!(
            out.status.success(),
            "{name} failed with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        names.push(name);
    }
    names
}
