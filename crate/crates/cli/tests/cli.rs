use std::path::Path;

use clap::Parser;
use phenokg_cli::{run, Cli, Command, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn phenokg(args: &[&str]) -> i32 {
    run(std::iter::once("phenokg").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(phenokg(&["bogus"]), EXIT_USAGE);
    assert_eq!(phenokg(&[]), EXIT_USAGE);
    assert_eq!(phenokg(&["rank", "--graph", "g"]), EXIT_USAGE);
    assert_eq!(phenokg(&["train", "--graph", "g", "--train", "t", "--out", "o", "--frobnicate"]), EXIT_USAGE);
    assert_eq!(phenokg(&["--help"]), EXIT_OK);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(phenokg(&["simulate", "--graph", s(&missing), "--out", s(&dir.path().join("p.jsonl"))]), EXIT_DATA);
}

#[test]
fn flag_address_beats_environment() {
    std::env::set_var("PHENOKG_ADDR", "0.0.0.0:9999");
    let from_env = Cli::try_parse_from(["phenokg", "serve", "--graph", "g", "--ckpt", "c"]).unwrap();
    let from_flag = Cli::try_parse_from(["phenokg", "serve", "--graph", "g", "--ckpt", "c", "--addr", "127.0.0.1:7000"]).unwrap();
    std::env::remove_var("PHENOKG_ADDR");
    let default = Cli::try_parse_from(["phenokg", "serve", "--graph", "g", "--ckpt", "c"]).unwrap();
    let addr = |c: Cli| match c.command {
        Command::Serve(a) => a.addr,
        _ => unreachable!(),
    };
    assert_eq!(addr(from_env), "0.0.0.0:9999");
    assert_eq!(addr(from_flag), "127.0.0.1:7000");
    assert_eq!(addr(default), "127.0.0.1:8080");
}

#[test]
fn full_pipeline_from_synthetic_graph() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (graph, patients, run_dir, report) = (d.join("graph"), d.join("patients.jsonl"), d.join("run"), d.join("report.json"));
    assert_eq!(phenokg(&["build-graph", "--synthetic", "--embedding-dim", "8", "--out", s(&graph)]), EXIT_OK);
    for f in ["nodes.tsv", "edges.tsv", "embeddings.bin"] {
        assert!(graph.join(f).exists(), "{f}");
    }
    assert_eq!(phenokg(&["simulate", "--graph", s(&graph), "--patients", "12", "--seed", "3", "--out", s(&patients)]), EXIT_OK);
    assert_eq!(std::fs::read_to_string(&patients).unwrap().lines().count(), 12);

    let train = ["train", "--graph", s(&graph), "--train", s(&patients), "--out", s(&run_dir), "--model", "small", "--lr", "1e-3"];
    assert_eq!(phenokg(&[&train[..], &["--epochs", "2"]].concat()), EXIT_OK);
    for f in ["best.ckpt", "last.ckpt", "report.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let last = run_dir.join("last.ckpt");
    assert_eq!(phenokg(&[&train[..], &["--epochs", "3", "--resume", s(&last)]].concat()), EXIT_OK);
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(trace["train_loss"].as_array().unwrap().len(), 3);

    let ckpt = run_dir.join("best.ckpt");
    let eval = ["evaluate", "--graph", s(&graph), "--ckpt", s(&ckpt), "--patients", s(&patients), "--mode", "khop", "--k", "2", "--out", s(&report)];
    assert_eq!(phenokg(&eval), EXIT_OK);
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let keys: Vec<&String> = rep.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["hits", "mrr", "ndcg", "patients", "top_q"]);
    assert_eq!(rep["patients"].as_array().unwrap().len(), 12);

    let rank = ["rank", "--graph", s(&graph), "--ckpt", s(&ckpt), "--phenotypes", "HP:0000003,HP:0000010", "--top", "3"];
    assert_eq!(phenokg(&rank), EXIT_OK);
    let bad = ["rank", "--graph", s(&graph), "--ckpt", s(&ckpt), "--phenotypes", "HP:0000000X"];
    assert_eq!(phenokg(&bad), EXIT_DATA);
}

#[test]
fn single_precision_training_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (graph, patients, run_dir) = (d.join("graph"), d.join("patients.jsonl"), d.join("run"));
    assert_eq!(phenokg(&["build-graph", "--synthetic", "--out", s(&graph)]), EXIT_OK);
    assert_eq!(phenokg(&["simulate", "--graph", s(&graph), "--patients", "6", "--out", s(&patients)]), EXIT_OK);
    let pretrained = ["train", "--graph", s(&graph), "--train", s(&patients), "--out", s(&run_dir), "--model", "small", "--epochs", "1"];
    assert_eq!(phenokg(&pretrained), EXIT_DATA);
    let random = [&pretrained[..], &["--embedding-mode", "random", "--input-dim", "8", "--precision", "f32"]].concat();
    assert_eq!(phenokg(&random), EXIT_OK);
    let ckpt = run_dir.join("best.ckpt");
    assert_eq!(phenokg_core::model::checkpoint::stored_width(&ckpt).unwrap(), 4);
    assert_eq!(phenokg(&["rank", "--graph", s(&graph), "--ckpt", s(&ckpt), "--phenotypes", "HP:0000003", "--json"]), EXIT_OK);
}
