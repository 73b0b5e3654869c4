use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use rflow_lab::checkpoint::Checkpoint;
use rflow_lab::format::load_dataset;

fn rflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rflow"))
        .args(args)
        .current_dir(cwd)
        .env("RF_THREADS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"{
  "task": {"kind": "gauss", "samples_per_class": 16},
  "train": {"steps": 40, "batch_size": 16},
  "reflow": {"train": {"steps": 5, "batch_size": 8}, "distill": {"steps": 5, "batch_size": 8}},
  "eval": {"samples": 8, "steps": [1, 5], "gammas": [0, 1, 4.5], "dopri5": false},
  "out_dir": "run"
}"#;

/// One full pipeline run shared by the tests that need checkpoints.
fn pipeline() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        std::fs::write(dir.join("cfg.json"), CONFIG).unwrap();
        for cmd in ["train", "reflow-gen", "reflow-train", "distill"] {
            let o = rflow(&[cmd, "--config", "cfg.json"], &dir);
            assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        }
        dir
    })
}

#[test]
fn gen_data_is_deterministic_and_counts_items() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), r#"{"kind": "gauss", "samples_per_class": 10, "seed": 4}"#).unwrap();
    for out in ["a.rfds", "b.rfds"] {
        let o = rflow(&["gen-data", "--spec", "spec.json", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("a.rfds")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.rfds")).unwrap());
    assert_eq!(load_dataset(&dir.path().join("a.rfds")).unwrap().len(), 80);
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.rfds.json")).unwrap()).unwrap();
    assert_eq!(side["count"], 80);
    assert!(side["version"].as_str().unwrap().starts_with("rflow "));
}

#[test]
fn malformed_spec_exits_2_with_position() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"kind\": \"gauss\",,\n}").unwrap();
    let o = rflow(&["gen-data", "--spec", "bad.json", "--out", "x.rfds"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2 column"), "{}", stderr(&o));
    std::fs::write(dir.path().join("unknown.json"), r#"{"kind": "gauss", "sigma": 1}"#).unwrap();
    let o = rflow(&["gen-data", "--spec", "unknown.json", "--out", "x.rfds"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("x.rfds").exists());
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), r#"{"kind": "gauss", "samples_per_class": 2}"#).unwrap();
    std::fs::write(dir.path().join("file"), "").unwrap();
    let o = rflow(&["gen-data", "--spec", "spec.json", "--out", "file/x.rfds"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn stages_without_prerequisites_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    for (cmd, missing) in [
        ("distill", "reflow.rfck"),
        ("reflow-train", "rfm.rfck"),
        ("reflow-gen", "rfm.rfck"),
    ] {
        let o = rflow(&[cmd, "--config", "cfg.json"], dir.path());
        assert_eq!(code(&o), 4, "{cmd}");
        assert!(stderr(&o).contains(missing), "{cmd}: {}", stderr(&o));
    }
    let o = rflow(&["sample", "--ckpt", "none.rfck", "--out", "s"], dir.path());
    assert_eq!(code(&o), 4);
}

#[test]
fn distill_without_store_exits_4() {
    let src = pipeline();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), CONFIG).unwrap();
    std::fs::create_dir(dir.path().join("run")).unwrap();
    std::fs::copy(src.join("run/reflow.rfck"), dir.path().join("run/reflow.rfck")).unwrap();
    let o = rflow(&["distill", "--config", "cfg.json"], dir.path());
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("reflow_store"), "{}", stderr(&o));
}

#[test]
fn pipeline_writes_chained_artifacts() {
    let dir = pipeline();
    let run = dir.join("run");
    let rfm = Checkpoint::load(&run.join("rfm.rfck")).unwrap();
    let reflow = Checkpoint::load(&run.join("reflow.rfck")).unwrap();
    let distill = Checkpoint::load(&run.join("distill.rfck")).unwrap();
    assert_eq!(rfm.meta.parent, None);
    assert_eq!(reflow.meta.parent.as_deref(), Some(rfm.meta.id.as_str()));
    assert_eq!(distill.meta.parent.as_deref(), Some(reflow.meta.id.as_str()));
    assert_eq!(reflow.meta.reflow_store, distill.meta.reflow_store);
    assert!(reflow.meta.reflow_store.is_some());
    assert_eq!(rfm.meta.run_config["train"]["steps"], 40);

    let store: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("reflow_store/meta.json")).unwrap()).unwrap();
    let g = &store["generation"];
    assert_eq!(g["solver"], "euler");
    assert_eq!(g["steps"], 25);
    assert_eq!(g["gamma"], 4.5);
    assert_eq!(g["source_checkpoint"], rfm.meta.id.as_str());
    assert_eq!(store["id"], reflow.meta.reflow_store.unwrap().as_str());

    for f in ["config.resolved.json", "rfm_loss.csv", "rfm_loss.csv.json", "reflow_loss.csv", "distill_loss.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let losses = std::fs::read_to_string(run.join("rfm_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 41);
    assert!(losses.starts_with("step,loss,grad_norm,wall_ms"));
    for (stage, logged) in [("rfm", false), ("reflow", true), ("distill", true)] {
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(run.join(format!("{stage}_loss.csv.json"))).unwrap()).unwrap();
        let drift = &side["null_branch_drift"];
        assert_eq!(drift.as_f64().is_some_and(f64::is_finite), logged, "{stage}: {drift}");
    }
}

fn sample_meta(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("samples.rfds.json")).unwrap()).unwrap()
}

#[test]
fn one_step_sampling_counts_field_evaluations() {
    let dir = pipeline();
    let o = rflow(&["sample", "--ckpt", "run/rfm.rfck", "--steps", "1", "--n", "5", "--out", "s1"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(sample_meta(&dir.join("s1"))["field_evals_per_sample"], 1.0);
    let o = rflow(
        &["sample", "--ckpt", "run/rfm.rfck", "--steps", "1", "--gamma", "4.5", "--n", "5", "--out", "s2"],
        dir,
    );
    assert_eq!(code(&o), 0);
    assert_eq!(sample_meta(&dir.join("s2"))["field_evals_per_sample"], 2.0);
    assert_eq!(load_dataset(&dir.join("s2/samples.rfds")).unwrap().len(), 5);
}

#[test]
fn gamma_one_equals_no_guidance_bytewise() {
    let dir = pipeline();
    let a = rflow(&["sample", "--ckpt", "run/rfm.rfck", "--steps", "4", "--gamma", "1", "--n", "6", "--out", "g1"], dir);
    let b = rflow(&["sample", "--ckpt", "run/rfm.rfck", "--steps", "4", "--n", "6", "--out", "g0"], dir);
    assert_eq!((code(&a), code(&b)), (0, 0));
    assert_eq!(
        std::fs::read(dir.join("g1/samples.rfds")).unwrap(),
        std::fs::read(dir.join("g0/samples.rfds")).unwrap()
    );
}

#[test]
fn trajectories_on_request() {
    let dir = pipeline();
    let o = rflow(
        &["sample", "--ckpt", "run/distill.rfck", "--steps", "3", "--n", "4", "--gamma", "4.5", "--trajectory", "--out", "tr"],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.join("tr/trajectories.csv")).unwrap();
    assert!(csv.starts_with("sample,index,t,x0,x1\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 4);
    assert!(std::fs::read_to_string(dir.join("tr/trajectories.svg")).unwrap().contains("<polyline"));
    assert!(sample_meta(&dir.join("tr"))["straightness"].is_number());
}

#[test]
fn sample_with_other_task_config_exits_5() {
    let dir = pipeline();
    std::fs::write(dir.join("events.json"), r#"{"task": {"kind": "events"}}"#).unwrap();
    let o = rflow(&["sample", "--ckpt", "run/rfm.rfck", "--config", "events.json", "--out", "m"], dir);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn eval_rows_and_rerun_stability() {
    let dir = pipeline();
    for r in ["e1.csv", "e2.csv"] {
        let o = rflow(&["eval", "--ckpt", "run/rfm.rfck", "--config", "cfg.json", "--report", r], dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |f: &str| -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(dir.join(f)).unwrap();
        r.records()
            .map(|rec| {
                let rec = rec.unwrap();
                // Drop the wall-clock column.
                rec.iter().take(rec.len() - 1).map(String::from).collect()
            })
            .collect()
    };
    let (a, b) = (read("e1.csv"), read("e2.csv"));
    assert_eq!(a.len(), 2 + 3);
    assert_eq!(a, b);
}

#[test]
fn bench_reports_every_setting() {
    let dir = pipeline();
    let o = rflow(&["bench", "--ckpt", "run/rfm.rfck", "--report", "b.csv", "--n", "4", "--repeats", "1"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.join("b.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("b.csv.json")).unwrap()).unwrap();
    assert!(side["ratio_25_to_1"].as_f64().unwrap() > 1.0);
}

#[test]
fn thread_count_does_not_change_samples() {
    let dir = pipeline();
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_rflow"))
            .args(["sample", "--ckpt", "run/rfm.rfck", "--steps", "3", "--gamma", "2", "--n", "9", "--out", out])
            .current_dir(dir)
            .env("RF_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        std::fs::read(dir.join(out).join("samples.rfds")).unwrap()
    };
    assert_eq!(run("1", "t1"), run("3", "t3"));
}

#[test]
fn help_documents_flags() {
    let o = rflow(&["sample", "--help"], Path::new("."));
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--ckpt", "--steps", "--dopri5", "--n", "--gamma", "--out", "--trajectory"] {
        assert!(text.contains(flag), "{flag}");
    }
}
