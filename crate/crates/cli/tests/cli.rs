use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use peftport::model::{HostModel, ModelConfig};
use peftport::porting::save_host;
use peftport::tasks::Vocab;
use serde_json::Value;

fn peftport(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_peftport"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn summary(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    v.sort();
    v
}

fn small_host(dir: &Path, name: &str, seed: u64, hidden: usize) -> PathBuf {
    let config = ModelConfig {
        hidden_dim: hidden,
        ffn_dim: 2 * hidden,
        num_enc_layers: 1,
        num_dec_layers: 1,
        num_heads: 2,
        ..ModelConfig::desk(Vocab::standard().len())
    };
    let path = dir.join(name);
    save_host(&HostModel::new(config, seed).unwrap(), &path).unwrap();
    path
}

fn gen(dir: &Path, name: &str, task: &str, n: &str, seed: &str) -> PathBuf {
    let path = dir.join(name);
    summary(&peftport(&["gen-data", "--task", task, "--n", n, "--seed", seed, "--out", s(&path)]));
    path
}

#[test]
fn unknown_flag_is_a_usage_error_without_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.tsv");
    let r = peftport(&["gen-data", "--task", "nli", "--n", "5", "--seed", "1", "--out", s(&out), "--colour"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--colour"));
    assert!(files_in(dir.path()).is_empty());
}

#[test]
fn stochastic_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.tsv");
    let r = peftport(&["gen-data", "--task", "nli", "--n", "5", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--seed"));
    let r = peftport(&["gen-data", "--task", "poetry", "--n", "5", "--seed", "1", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(files_in(dir.path()).is_empty());
}

#[test]
fn help_exits_zero() {
    let r = peftport(&["--help"]);
    assert_eq!(r.status.code(), Some(0));
    for cmd in ["build-models", "gen-data", "peft-train", "export", "import", "eval", "grid", "report"] {
        assert!(String::from_utf8_lossy(&r.stdout).contains(cmd), "{cmd}");
    }
}

#[test]
fn report_on_empty_results_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let r = peftport(&["report", "--results", s(dir.path())]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("no records"));
    assert!(files_in(dir.path()).is_empty());
}

#[test]
fn gen_data_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.tsv", "sentiment-a", "50", "4");
    let b = gen(dir.path(), "b.tsv", "sentiment-a", "50", "4");
    let c = gen(dir.path(), "c.tsv", "sentiment-a", "50", "5");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 50);
}

#[test]
fn eval_on_two_examples_is_discrete() {
    let dir = tempfile::tempdir().unwrap();
    let host = small_host(dir.path(), "h.peftmod", 1, 16);
    let data = gen(dir.path(), "two.tsv", "sentiment-a", "2", "9");
    let v = summary(&peftport(&["eval", "--model", s(&host), "--data", s(&data)]));
    let acc = v["accuracy"].as_f64().unwrap();
    assert!([0.0, 0.5, 1.0].contains(&acc), "{acc}");
    assert_eq!(v["n_examples"], 2);
}

#[test]
fn train_port_and_eval_pipeline_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let origin = small_host(d, "origin.peftmod", 1, 16);
    let receiving = small_host(d, "receiving.peftmod", 2, 16);
    let train = gen(d, "train.tsv", "sentiment-a", "30", "11");
    let test = gen(d, "test.tsv", "sentiment-a", "10", "13");
    let inputs = [&origin, &receiving, &train, &test];
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| std::fs::read(p).unwrap()).collect();

    let train_to = |out: &Path| {
        summary(&peftport(&[
            "peft-train", "--model", s(&origin), "--data", s(&train), "--technique", "lora",
            "--steps", "5", "--lr", "1e-2", "--batch-tokens", "96", "--seed", "3", "--out", s(out),
        ]))
    };
    let m1 = d.join("m1.peftmod");
    let m2 = d.join("m2.peftmod");
    let v = train_to(&m1);
    assert_eq!(v["technique"], "lora");
    train_to(&m2);
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());

    let exported = d.join("exported.peftmod");
    summary(&peftport(&["export", "--module", s(&m1), "--model", s(&origin), "--out", s(&exported)]));
    assert_eq!(std::fs::read(&exported).unwrap(), std::fs::read(&m1).unwrap());

    let import = |scenario: &str, out: &Path| {
        summary(&peftport(&[
            "import", "--module", s(&exported), "--model", s(&receiving), "--scenario", scenario,
            "--seed", "3", "--out", s(out),
        ]))
    };
    let ported = d.join("ported.peftmod");
    let sampled = d.join("sampled.peftmod");
    let sampled_again = d.join("sampled2.peftmod");
    let scratch = d.join("scratch.peftmod");
    import("ported", &ported);
    import("sampled", &sampled);
    import("sampled", &sampled_again);
    import("from_scratch", &scratch);
    assert_eq!(std::fs::read(&ported).unwrap(), std::fs::read(&m1).unwrap());
    assert_eq!(std::fs::read(&sampled).unwrap(), std::fs::read(&sampled_again).unwrap());
    assert_ne!(std::fs::read(&sampled).unwrap(), std::fs::read(&ported).unwrap());

    let post = d.join("post.peftmod");
    summary(&peftport(&[
        "peft-train", "--model", s(&receiving), "--data", s(&train), "--init", s(&ported),
        "--steps", "3", "--batch-tokens", "96", "--seed", "4", "--out", s(&post),
    ]));
    let v = summary(&peftport(&["eval", "--model", s(&receiving), "--module", s(&post), "--data", s(&test)]));
    assert_eq!(v["n_examples"], 10);

    let after: Vec<Vec<u8>> = inputs.iter().map(|p| std::fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn out_may_not_overwrite_an_input() {
    let dir = tempfile::tempdir().unwrap();
    let host = small_host(dir.path(), "h.peftmod", 1, 16);
    let before = std::fs::read(&host).unwrap();
    let r = peftport(&[
        "import", "--module", s(&host), "--model", s(&host), "--scenario", "ported", "--seed", "1",
        "--out", s(&host),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(std::fs::read(&host).unwrap(), before);
}

#[test]
fn incompatible_import_fails_at_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let origin = small_host(d, "origin.peftmod", 1, 16);
    let wide = small_host(d, "wide.peftmod", 2, 32);
    let train = gen(d, "train.tsv", "sentiment-a", "10", "1");
    let m = d.join("m.peftmod");
    summary(&peftport(&[
        "peft-train", "--model", s(&origin), "--data", s(&train), "--technique", "adapter",
        "--steps", "1", "--seed", "1", "--out", s(&m),
    ]));
    let out = d.join("out.peftmod");
    let r = peftport(&[
        "import", "--module", s(&m), "--model", s(&wide), "--scenario", "ported", "--seed", "1",
        "--out", s(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("hidden_dim"));
    assert!(!out.exists());
}

#[test]
fn grid_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_host(d, "raw.peftmod", 1, 16);
    small_host(d, "instruct.peftmod", 2, 16);
    gen(d, "a.tsv", "sentiment-a", "30", "11");
    gen(d, "b.tsv", "sentiment-b", "30", "12");
    gen(d, "test.tsv", "sentiment-a", "10", "13");
    let spec = d.join("grid.toml");
    std::fs::write(
        &spec,
        r#"
techniques = ["lora"]
conditions = ["same", "different"]
scenarios = ["ported", "sampled", "from_scratch"]
pre_steps = [4]
post_steps = [0, 2]
seeds = [1]

[[model_pairs]]
origin = "raw"
receiving = "instruct"

[training]
pre_learning_rate = 1e-2
pre_batch_tokens = 96
post_batch_tokens = 96

[artifacts]
dataset_a = "a.tsv"
dataset_b = "b.tsv"
test = "test.tsv"

[artifacts.hosts]
raw = "raw.peftmod"
instruct = "instruct.peftmod"
"#,
    )
    .unwrap();
    let run = |out: &Path| {
        summary(&peftport(&[
            "grid", "--spec", s(&spec), "--out", s(out), "--workers", "2", "--seed", "7",
        ]))
    };
    let out = d.join("results");
    let v = run(&out);
    assert_eq!(v["runs"], 2 * (2 * 2 + 2));
    let records = std::fs::read(out.join("records.jsonl")).unwrap();
    assert!(String::from_utf8_lossy(&records).contains("\"seed\":8"));
    run(&out);
    assert_eq!(std::fs::read(out.join("records.jsonl")).unwrap(), records);

    let v = summary(&peftport(&["report", "--results", s(&out)]));
    assert_eq!(v["records"], 12);
    assert!(v["charts"].as_u64().unwrap() > 0);
    assert!(out.join("report").is_dir());
}
