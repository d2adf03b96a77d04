use std::fs;
use std::path::Path;
use std::process::Command;

use jaccard_core::cli::{self, CHECKPOINT_FILE, CONFIG_ECHO, EVAL_METRICS_FILE, HISTORY_FILE, METRICS_FILE};
use jaccard_core::config::ExperimentConfig;
use jaccard_core::data::{generate, load_dataset, Mode};
use tempfile::TempDir;

const TINY_EARLY: &str = r#"{
  "dataset": {"train_size": 48, "test_size": 24},
  "model": {"hidden": 6},
  "train": {"epochs": 2, "batch_size": 16},
  "eval": {"p": [0.25, 0.5], "top_k": 3},
  "sweep": {"seeds": [0, 1]}
}"#;

const TINY_ANTICIPATION: &str = r#"{
  "generator": {"classes": 6},
  "dataset": {"train_size": 48, "test_size": 24},
  "model": {"hidden": 6},
  "train": {"epochs": 2, "batch_size": 16},
  "objective": {"mode": "anticipation", "losses": [{"kind": "JVS"}]},
  "eval": {"top_k": 3}
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run(args: &[&str]) -> jaccard_core::Result<String> {
    let mut out = Vec::new();
    let argv = std::iter::once("jaccard").chain(args.iter().copied());
    cli::run(argv, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_data_round_trips_and_is_byte_stable() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let stdout = run(&["gen-data", "--out", a.to_str().unwrap()]).unwrap();
    assert!(stdout.contains("4000 train, 1000 test"), "{stdout}");
    assert!(stdout.contains("oracle accuracy at p = 0.25"), "{stdout}");
    run(&["gen-data", "--out", b.to_str().unwrap()]).unwrap();
    for f in ["train.earf", "test.earf", "summary.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let want = generate(&ExperimentConfig::default().generator_config(), Mode::Early, 4000, 1000).unwrap();
    assert_eq!(load_dataset(&a.join("train.earf")).unwrap(), want.train);
    assert_eq!(load_dataset(&a.join("test.earf")).unwrap(), want.test);
}

#[test]
fn deterministic_transitions_have_zero_entropy() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"objective": {"mode": "anticipation"}, "generator": {"transition_peak": 1.0},
            "dataset": {"train_size": 10, "test_size": 200}}"#,
    );
    let out = tmp.path().join("o");
    let stdout = run(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]).unwrap();
    assert!(stdout.contains("min 0.000000, max 0.000000"), "{stdout}");
    let summary: serde_json::Value = serde_json::from_slice(&read(out.join("summary.json"))).unwrap();
    let h = summary["transition_entropy"].as_array().unwrap();
    assert_eq!(h.len(), 20);
    assert!(h.iter().all(|v| v.as_f64() == Some(0.0)));
}

#[test]
fn train_then_eval_reproduces_final_metrics_bitwise() {
    for text in [TINY_EARLY, TINY_ANTICIPATION] {
        let tmp = TempDir::new().unwrap();
        let cfg = write_config(tmp.path(), text);
        let out = tmp.path().join("run");
        let o = out.to_str().unwrap();
        run(&["train", "--config", &cfg, "--out", o]).unwrap();
        let ckpt = out.join(CHECKPOINT_FILE);
        run(&["eval", "--config", &cfg, "--out", o, "--checkpoint", ckpt.to_str().unwrap()]).unwrap();
        assert_eq!(read(out.join(METRICS_FILE)), read(out.join(EVAL_METRICS_FILE)));
        let history = String::from_utf8(read(out.join(HISTORY_FILE))).unwrap();
        assert_eq!(history.lines().count(), 3);
        assert!(history.starts_with("epoch,train_loss,eval_top1,eval_topk,saturation_events"));
    }
}

#[test]
fn eval_applies_kinds_like_train() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_EARLY);
    let out = tmp.path().join("run");
    let o = out.to_str().unwrap();
    run(&["train", "--config", &cfg, "--out", o, "--kinds", "JVS+JCC"]).unwrap();
    let echo = read(out.join(CONFIG_ECHO));
    let ckpt = out.join(CHECKPOINT_FILE);
    let c = ckpt.to_str().unwrap();
    run(&["eval", "--config", &cfg, "--out", o, "--checkpoint", c, "--kinds", "JVS+JCC"]).unwrap();
    assert_eq!(read(out.join(METRICS_FILE)), read(out.join(EVAL_METRICS_FILE)));
    assert_eq!(read(out.join(CONFIG_ECHO)), echo);
    let e = run(&["eval", "--config", &cfg, "--out", o, "--checkpoint", c, "--kinds", "JVS,JCC"]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn repeated_train_is_bitwise_identical_and_echo_reproduces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_EARLY);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run(&["train", "--config", &cfg, "--out", a.to_str().unwrap(), "--seed", "7", "--kinds", "JVS"]).unwrap();
    run(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "7", "--kinds", "JVS"]).unwrap();
    let echo = a.join(CONFIG_ECHO);
    run(&["train", "--config", echo.to_str().unwrap(), "--out", c.to_str().unwrap()]).unwrap();
    for f in [METRICS_FILE, HISTORY_FILE, CHECKPOINT_FILE, CONFIG_ECHO] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
        assert_eq!(read(a.join(f)), read(c.join(f)), "{f} from echo");
    }
    let echoed = ExperimentConfig::load(&echo).unwrap();
    assert_eq!(echoed.train.seed, 7);
    assert_eq!(echoed.generator.seed, Some(7));
    assert_eq!(echoed.objective.losses.len(), 1);
    assert_eq!(echoed.objective.losses[0].lambda, Some(1.0));
}

#[test]
fn sweep_table_shape_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), TINY_EARLY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |o: &Path| {
        run(&["sweep", "--config", &cfg, "--out", o.to_str().unwrap(), "--kinds", "Baseline,Cosine,JVS"]).unwrap()
    };
    let table = args(&a);
    args(&b);
    for f in ["sweep.csv", "sweep.txt", "sweep_runs.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let csv = String::from_utf8(read(a.join("sweep.csv"))).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("Baseline,Baseline,2,"), "{csv}");
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("2")));
    assert!(table.contains("Vector similarity measures"));
    assert_eq!(String::from_utf8(read(a.join("sweep_runs.csv"))).unwrap().lines().count(), 7);
}

#[test]
fn sweep_includes_combination_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"dataset": {"train_size": 32, "test_size": 16}, "model": {"hidden": 4},
            "train": {"epochs": 1, "batch_size": 16}, "sweep": {"seeds": [0]}}"#,
    );
    let out = tmp.path().join("s");
    let table =
        run(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--kinds", "JVS+JCC+JFIP,JFIP,Baseline"])
            .unwrap();
    let groups: Vec<&str> = table.lines().filter(|l| !l.starts_with(' ')).skip(1).collect();
    assert_eq!(groups, ["Baseline", "Covariance measures", "Combinations"]);
    assert!(table.contains("JVS+JCC+JFIP"));
}

#[test]
fn validation_errors_are_config_errors() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"train": {"learning_rate": 0.1, "momentum": 0.9}}"#);
    let out = tmp.path().join("x");
    let e = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let e = run(&["train", "--out", out.to_str().unwrap(), "--kinds", "JVS,Cosine"]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let e = run(&["sweep", "--out", out.to_str().unwrap(), "--kinds", "JVS+Nope"]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
    let e = run(&["train"]).unwrap_err();
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn binary_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let bin = env!("CARGO_BIN_EXE_jaccard");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["frobnicate"]), Some(1));
    let missing = tmp.path().join("missing.json");
    let out = tmp.path().join("o");
    assert_eq!(status(&["gen-data", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), Some(3));
    let bad = write_config(tmp.path(), r#"{"generator": {"noise": -1.0}}"#);
    assert_eq!(status(&["gen-data", "--config", &bad, "--out", out.to_str().unwrap()]), Some(1));
}

#[test]
fn losscheck_report_passes() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("lc");
    let stdout = run(&["losscheck", "--out", out.to_str().unwrap()]).unwrap();
    assert!(stdout.contains("checks passed"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&read(out.join("losscheck.json"))).unwrap();
    assert_eq!(report["passed"], true);
    let checks = report["checks"].as_array().unwrap();
    let find = |n: &str| checks.iter().find(|c| c["name"] == n).unwrap_or_else(|| panic!("{n}"));
    assert!(find("jvs_z_2z")["measured"].as_f64().unwrap() < 1e-9);
    let grads = checks
        .iter()
        .filter(|c| {
            c["name"].as_str().unwrap().starts_with("grad_") && !c["name"].as_str().unwrap().contains("objective")
        })
        .count();
    assert_eq!(grads, 10);
    for c in checks.iter().filter(|c| c["name"].as_str().unwrap().starts_with("grad_")) {
        assert!(c["measured"].as_f64().unwrap() < 1e-4, "{c}");
    }
}
