use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "seed": 3,
  "model": {"d_model": 32, "n_layers": 2, "attn_layers": [1], "n_heads": 2, "n_kv_heads": 1,
            "head_dim": 16, "d_state": 4, "dt_rank": 4, "mlp_hidden": 64, "max_position": 512},
  "teacher": {"train": {"steps": 6, "batch_rows": 2, "seq_len": 128, "eval_every": 3, "checkpoint_every": 2}},
  "distill": {"lr": 0.001, "train": {"steps": 6, "batch_rows": 2, "seq_len": 128, "eval_every": 3, "checkpoint_every": 2}},
  "sft": {"lr": 0.001, "train": {"steps": 6, "batch_rows": 2, "seq_len": 128, "eval_every": 3, "checkpoint_every": 2}},
  "grpo": {"batch_size": 2, "ppo_batch": 1, "group_size": 2, "max_gen_len": 8, "lr": 0.0001, "steps": 4,
           "checkpoint_every": 2},
  "eval": {"samples": 2, "max_tokens": 8, "ks": [1, 2], "maj_trials": 5},
  "bench": {"scenario": {"prompt_len": 4, "decode_len": 4, "warmup_runs": 0, "timed_runs": 1}, "batches": [1, 2]}
}"#;

struct Ws {
    dir: TempDir,
}

impl Ws {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.p("cfg.json"), TINY).unwrap();
        let out = ws.run(&["toy-data", "--out", "data", "--tasks", "8", "--eval-tasks", "4", "--per-task", "2"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        ws
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_hybrid"));
        c.current_dir(self.dir.path()).args(args).env_remove("HYBRID_SEED").env_remove("HYBRID_HALT_AT");
        for (k, v) in env {
            c.env(k, v);
        }
        c.output().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }

    fn teacher(&self) -> PathBuf {
        self.ok(&["train-teacher", "-c", "cfg.json", "--run-dir", "teacher", "--data", "data/corpus.jsonl"]);
        self.p("teacher/model.ckpt")
    }
}

fn error_record(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap_or("")).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_end_to_end() {
    let ws = Ws::new();
    ws.teacher();
    ws.ok(&["init-hybrid", "-c", "cfg.json", "--teacher", "teacher/model.ckpt", "--out", "init.ckpt"]);
    ws.ok(&[
        "distill", "-c", "cfg.json", "--run-dir", "distill", "--teacher", "teacher/model.ckpt", "--student", "init.ckpt",
        "--data", "data/corpus.jsonl",
    ]);
    ws.ok(&["sft", "-c", "cfg.json", "--run-dir", "sft", "--model", "distill/model.ckpt", "--data", "data/corpus.jsonl"]);
    ws.ok(&["grpo", "-c", "cfg.json", "--run-dir", "grpo", "--model", "sft/model.ckpt", "--tasks", "data/tasks.jsonl"]);
    for f in ["config.json", "log.jsonl", "metrics.csv", "latest.ckpt", "optimizer.ckpt", "state.json", "model.ckpt", "best.ckpt"] {
        assert!(ws.p("grpo").join(f).exists(), "missing grpo/{f}");
    }
    assert!(!ws.p("grpo/run.lock").exists());
    let metrics = fs::read_to_string(ws.p("grpo/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    assert!(metrics.starts_with("step,mean_reward,mean_len,entropy"));

    let sft_metrics = fs::read_to_string(ws.p("sft/metrics.csv")).unwrap();
    assert_eq!(sft_metrics.lines().count(), 7);
    for line in fs::read_to_string(ws.p("sft/log.jsonl")).unwrap().lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_string() && v["time"].is_number());
    }

    ws.ok(&["eval", "-c", "cfg.json", "--model", "grpo/model.ckpt", "--tasks", "data/eval_tasks.jsonl", "--out", "ev"]);
    let rep: Value = serde_json::from_slice(&read(&ws.p("ev/report.json"))).unwrap();
    assert_eq!(rep["problems"], 4);
    let p1 = rep["pass@k"]["1"].as_f64().unwrap();
    let p2 = rep["pass@k"]["2"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p1) && p2 >= p1);

    // re-scoring saved results reproduces the report
    ws.ok(&["eval", "-c", "cfg.json", "--results", "ev/results.jsonl", "--out", "ev2"]);
    assert_eq!(read(&ws.p("ev/report.json")), read(&ws.p("ev2/report.json")));

    ws.ok(&["generate", "-c", "cfg.json", "--model", "sft/model.ckpt", "--prompts", "data/eval_tasks.jsonl", "--out", "gen.jsonl"]);
    assert_eq!(fs::read_to_string(ws.p("gen.jsonl")).unwrap().lines().count(), 8);

    ws.ok(&["bench", "-c", "cfg.json", "--model", "sft/model.ckpt", "--out", "bench"]);
    let bench = fs::read_to_string(ws.p("bench/bench.csv")).unwrap();
    assert!(bench.lines().count() >= 2);
    ws.ok(&[
        "curve", "--report", "ev/report.json", "--bench-csv", "bench/bench.csv", "--tokens-per-sample", "8", "--out",
        "curve.csv",
    ]);
    let curve = fs::read_to_string(ws.p("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("samples,seconds,accuracy"));
    assert_eq!(curve.lines().count(), 3);
}

fn interrupted_then_resumed(ws: &Ws, args: &[&str], dir: &str, halt: &str) {
    let full: Vec<&str> = args.iter().copied().chain(["--run-dir", dir]).collect();
    let out = ws.run_env(&full, &[("HYBRID_HALT_AT", halt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("halted"));
    assert!(ws.p(dir).join("error.json").exists());
    assert!(!ws.p(dir).join("run.lock").exists());

    // a fresh start on a directory with state is refused
    let again = ws.run(&full);
    assert_eq!(again.status.code(), Some(1));
    assert!(error_record(&again)["message"].as_str().unwrap().contains("--resume"));

    let resumed: Vec<&str> = full.iter().copied().chain(["--resume"]).collect();
    ws.ok(&resumed);
}

#[test]
fn sft_resume_matches_uninterrupted_run() {
    let ws = Ws::new();
    ws.teacher();
    let args = ["sft", "-c", "cfg.json", "--model", "teacher/model.ckpt", "--data", "data/corpus.jsonl"];
    ws.ok(&[&args[..], &["--run-dir", "a"]].concat());
    // step 3 is logged but its checkpoint (after 4 updates) is never written
    interrupted_then_resumed(&ws, &args, "b", "3");
    assert_eq!(read(&ws.p("a/metrics.csv")), read(&ws.p("b/metrics.csv")));
    assert_eq!(read(&ws.p("a/model.ckpt")), read(&ws.p("b/model.ckpt")));
}

#[test]
fn grpo_resume_matches_uninterrupted_run() {
    let ws = Ws::new();
    ws.teacher();
    let args = ["grpo", "-c", "cfg.json", "--model", "teacher/model.ckpt", "--tasks", "data/tasks.jsonl"];
    ws.ok(&[&args[..], &["--run-dir", "a"]].concat());
    interrupted_then_resumed(&ws, &args, "b", "2");
    assert_eq!(read(&ws.p("a/metrics.csv")), read(&ws.p("b/metrics.csv")));
    assert_eq!(read(&ws.p("a/model.ckpt")), read(&ws.p("b/model.ckpt")));
    assert_eq!(read(&ws.p("a/best.ckpt")), read(&ws.p("b/best.ckpt")));
}

#[test]
fn unknown_config_keys_exit_with_schema_error() {
    let ws = Ws::new();
    fs::write(ws.p("bad.json"), r#"{"grpo": {"group": 4}, "sft": {"train": {"stepz": 1}}}"#).unwrap();
    let out = ws.run(&["sft", "-c", "bad.json", "--run-dir", "r", "--model", "x.ckpt", "--data", "data/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "config");
    let msg = rec["message"].as_str().unwrap();
    assert!(msg.contains("grpo.group") && msg.contains("sft.train.stepz"), "{msg}");
}

#[test]
fn seed_env_overrides_config() {
    let ws = Ws::new();
    let out = ws.run_env(
        &["train-teacher", "-c", "cfg.json", "--run-dir", "t", "--data", "data/corpus.jsonl"],
        &[("HYBRID_SEED", "41")],
    );
    assert!(out.status.success());
    let cfg: Value = serde_json::from_slice(&read(&ws.p("t/config.json"))).unwrap();
    assert_eq!(cfg["seed"], 41);
    assert_eq!(cfg["sft"]["train"]["seed"], 41);

    let bad = ws.run_env(&["init-hybrid", "--teacher", "t/model.ckpt", "--out", "x"], &[("HYBRID_SEED", "abc")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn locked_run_dir_is_refused() {
    let ws = Ws::new();
    fs::create_dir_all(ws.p("r")).unwrap();
    fs::write(ws.p("r/run.lock"), "1").unwrap();
    let out = ws.run(&["train-teacher", "-c", "cfg.json", "--run-dir", "r", "--data", "data/corpus.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("locked"));
    assert!(ws.p("r/run.lock").exists());
}

#[test]
fn oversized_bench_is_rejected_with_sizing() {
    let ws = Ws::new();
    let out = ws.run(&["bench", "-c", "cfg.json", "--preset", "config", "--batches", "1", "--decode-len", "4096", "--out", "b"]);
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "invalid");
    assert!(rec["message"].as_str().unwrap().contains("rejected"));
}
