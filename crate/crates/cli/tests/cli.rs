use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rxncond::reaction::Grouping;
use rxncond::synthetic::{condition_records, joined_records, write_condition_csv, write_joined_csv};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rxncond"));
    c.env_remove("RXNCOND_PRECISION");
    c
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn condition_csv(dir: &Path, n: usize) -> PathBuf {
    let p = dir.join("cond.csv");
    write_condition_csv(File::create(&p).unwrap(), &condition_records(n, 5).unwrap()).unwrap();
    p
}

const SMALL_MODEL: &str = "[model]
width = 8
llm_width = 8
heads = 2
encoder_layers = 1
encoder_max_len = 48
graph_hidden = 8
graph_out = 8
smiles_tokens = 8
tower_depth = 1
decoder_layers = 1
max_text_tokens = 12
max_target_tokens = 40
";

fn write_config(dir: &Path, task: &str, epochs: usize) -> PathBuf {
    let p = dir.join(format!("{task}.toml"));
    std::fs::write(
        &p,
        format!("data = \"data.jsonl\"\nout_dir = \"run-{task}\"\ntask = \"{task}\"\nseed = 3\nepochs = {epochs}\nmax_lr = 3e-3\n{SMALL_MODEL}"),
    )
    .unwrap();
    p
}

#[test]
fn build_data_writes_one_line_per_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let csv = condition_csv(dir.path(), 12);
    let out = dir.path().join("data.jsonl");
    ok(bin()
        .args(["build-data", "--input"])
        .arg(&csv)
        .args(["--flavor", "condition", "--seed", "4", "--expand", "3", "--output"])
        .arg(&out)
        .output()
        .unwrap());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 36);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "syn0000#0");
    assert!(first["question"].as_str().unwrap().contains("<SMILES>"));
}

#[test]
fn build_data_with_pool_and_joined_flavor() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grouping::bundled();
    let recs = joined_records(10, 2, &g).unwrap();
    let csv = dir.path().join("mt.csv");
    write_joined_csv(File::create(&csv).unwrap(), &recs).unwrap();
    let pool = dir.path().join("pool.jsonl");
    let lines: Vec<String> = recs
        .iter()
        .map(|r| serde_json::json!({"reaction_smiles": r.raw, "corpus": format!("pool text for {}", r.id)}).to_string())
        .collect();
    std::fs::write(&pool, lines.join("\n")).unwrap();
    let out = dir.path().join("mt.jsonl");
    ok(bin()
        .args(["build-data", "--flavor", "500mt", "--input"])
        .arg(&csv)
        .arg("--pool")
        .arg(&pool)
        .arg("--output")
        .arg(&out)
        .output()
        .unwrap());
    let text = std::fs::read_to_string(&out).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first["corpus"], "pool text for syn0000");
    assert!(first.get("slots").is_none());
}

#[test]
fn stats_reports_sparsity() {
    let dir = tempfile::tempdir().unwrap();
    let csv = condition_csv(dir.path(), 40);
    let v: serde_json::Value = serde_json::from_str(&ok(bin().args(["stats", "--input"]).arg(&csv).output().unwrap())).unwrap();
    assert_eq!(v["records"], 40);
    assert_eq!(v["sparsity"]["slots"][1]["density"], 1.0);
    // eight catalysts are too few categories for a fit
    assert!(v["power_law"]["catalyst"]["error"].is_string());
}

#[test]
fn train_evaluate_recommend_round() {
    let dir = tempfile::tempdir().unwrap();
    let csv = condition_csv(dir.path(), 20);
    ok(bin()
        .args(["build-data", "--input"])
        .arg(&csv)
        .arg("--output")
        .arg(dir.path().join("data.jsonl"))
        .output()
        .unwrap());
    let cfg = write_config(dir.path(), "classify", 2);
    let v: serde_json::Value = serde_json::from_str(&ok(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--seed", "9"])
        .output()
        .unwrap()))
    .unwrap();
    assert_eq!(v["epochs_run"], 2);
    let ckpt = dir.path().join("run-classify/model.ntf");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("run-classify/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let report: serde_json::Value = serde_json::from_str(&ok(bin()
        .args(["evaluate", "--checkpoint"])
        .arg(&ckpt)
        .args(["--split", "test", "--topk", "1,3"])
        .output()
        .unwrap()))
    .unwrap();
    assert_eq!(report["records"], 2);
    assert_eq!(report["rows"].as_array().unwrap().len(), 10);
    let csv_out = std::fs::read_to_string(dir.path().join("run-classify/report-test.csv")).unwrap();
    assert!(csv_out.starts_with("model,slot,k,accuracy\n"));

    let cands = dir.path().join("cands.txt");
    std::fs::write(&cands, "O\nCO\n").unwrap();
    let ranked: serde_json::Value = serde_json::from_str(&ok(bin()
        .args(["recommend", "--checkpoint"])
        .arg(&ckpt)
        .args(["--reaction", "CCO.CN>>CCOCN", "--role", "solvent1", "--candidates"])
        .arg(&cands)
        .output()
        .unwrap()))
    .unwrap();
    let ranked = ranked.as_array().unwrap();
    assert_eq!(ranked.len(), 2);
    let total: f64 = ranked.iter().map(|r| r["score"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-6);

    std::fs::write(&cands, "[Xe]\n").unwrap();
    let out = bin()
        .args(["recommend", "--checkpoint"])
        .arg(&ckpt)
        .args(["--reaction", "CCO.CN>>CCOCN", "--role", "solvent1", "--candidates"])
        .arg(&cands)
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn f64_precision_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grouping::bundled();
    let csv = dir.path().join("mt.csv");
    write_joined_csv(File::create(&csv).unwrap(), &joined_records(12, 4, &g).unwrap()).unwrap();
    ok(bin()
        .args(["build-data", "--flavor", "500mt", "--input"])
        .arg(&csv)
        .arg("--output")
        .arg(dir.path().join("data.jsonl"))
        .output()
        .unwrap());
    let cfg = write_config(dir.path(), "generate", 1);
    ok(bin().env("RXNCOND_PRECISION", "f64").args(["train", "--config"]).arg(&cfg).output().unwrap());
    let ckpt = dir.path().join("run-generate/model.ntf");
    let ranked: serde_json::Value = serde_json::from_str(&ok(bin()
        .env("RXNCOND_PRECISION", "f64")
        .args(["recommend", "--topk", "2", "--checkpoint"])
        .arg(&ckpt)
        .args(["--reaction", "CCO.CN>>CCOCN"])
        .output()
        .unwrap()))
    .unwrap();
    assert!(ranked.as_array().unwrap().len() <= 2);

    let bad = bin().env("RXNCOND_PRECISION", "f16").args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("RXNCOND_PRECISION"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["stats", "--input"]).arg(dir.path().join("missing.csv")).output().unwrap();
    assert!(!out.status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "epochs = 0\n").unwrap();
    assert!(!bin().args(["train", "--config"]).arg(&cfg).output().unwrap().status.success());
    let cfg = write_config(dir.path(), "classify", 1);
    let out = bin().args(["train", "--task", "rank", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn check_grad_passes() {
    let out = ok(bin().args(["check-grad", "--configs", "2"]).output().unwrap());
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 30);
    assert!(!out.contains("FAIL"));
}
