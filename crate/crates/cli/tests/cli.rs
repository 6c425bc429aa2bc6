use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqdesign::envs::SimBank;

fn seqdesign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqdesign")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, out: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"seed = 11
output_dir = "{}"
checkpoint_every = 5

[env]
name = "source_location"
params = {{ source_counts = [1], horizon = 3 }}

[train]
n_update = 10
n_episode = 16
n_batch = 32
actor_hidden = [8]
critic_hidden = [8]
posteriors = {{ n_mixture = 2, widths = {{ model = [8], gmm_feature = [8], gmm_head = [8], flow_feature = [8], flow_coupling = [8] }} }}
{extra}
[evaluation]
n_episodes = 40
l = 50
"#,
        out.display()
    );
    let path = dir.join(format!("run{}.toml", out.file_name().unwrap().to_string_lossy()));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_names_the_path() {
    let out = seqdesign(&["train", "/no/such/config.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/config.toml"));
}

#[test]
fn invalid_config_lists_the_offending_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("bad"), "target_rate = 2.0\n");
    let out = seqdesign(&["train", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_rate"));
}

#[test]
fn train_evaluate_resume_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("a");
    let cfg = write_config(dir.path(), &run, "");
    ok(&seqdesign(&["train", cfg.to_str().unwrap()]));
    assert!(run.join("checkpoint.ckpt").exists());
    assert!(run.join("checkpoint_5.ckpt").exists());
    assert!(run.join("config.toml").exists());
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 11);
    assert!(history.starts_with("iteration,utility,critic_loss,actor_grad_norm,noise_scale,psi"));

    // The resolved config is itself a complete, loadable config.
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(resolved.contains("gamma = 1.0"));
    assert!(resolved.contains("n_episode = 16"));

    let resumed = dir.path().join("b");
    let cfg_b = write_config(dir.path(), &resumed, "");
    let ckpt5 = run.join("checkpoint_5.ckpt");
    ok(&seqdesign(&["train", cfg_b.to_str().unwrap(), "--resume", ckpt5.to_str().unwrap()]));
    assert_eq!(fs::read(resumed.join("history.csv")).unwrap(), fs::read(run.join("history.csv")).unwrap());

    let other = dir.path().join("c");
    let cfg_c = write_config(dir.path(), &other, "n_batch = 31\n");
    let out = seqdesign(&["train", cfg_c.to_str().unwrap(), "--resume", ckpt5.to_str().unwrap()]);
    assert!(!out.status.success());

    let eval = dir.path().join("eval");
    let ckpt = run.join("checkpoint.ckpt");
    ok(&seqdesign(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--out", eval.to_str().unwrap()]));
    let records: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("evaluation.json")).unwrap()).unwrap();
    let names: Vec<&str> = records.as_array().unwrap().iter().map(|r| r["estimator"].as_str().unwrap()).collect();
    assert_eq!(names, vec!["pce", "variational"]);
    for r in records.as_array().unwrap() {
        for key in ["estimator", "n", "L", "mean", "se", "config_hash", "seed"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let stages = fs::read_to_string(eval.join("stages.csv")).unwrap();
    assert!(stages.contains("variational,0,0,0"));

    let samples = dir.path().join("post.csv");
    ok(&seqdesign(&[
        "export-posterior",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--episode",
        "2",
        "--samples",
        "25",
        "--out",
        samples.to_str().unwrap(),
    ]));
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert_eq!(text.lines().next().unwrap(), "x0,x1");
}

#[test]
fn uniform_baseline_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("u");
    let cfg = write_config(dir.path(), &run, "");
    ok(&seqdesign(&["evaluate", "--config", cfg.to_str().unwrap(), "--policy", "uniform"]));
    let records: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(records[0]["estimator"], "pce");
    assert_eq!(records[0]["n"], 40);
    assert_eq!(records[0]["L"], 50);
}

#[test]
fn certification_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        ok(&seqdesign(&["certify", "--instances", "6", "--perturbations", "10", "--seed", "3", "--out", p.to_str().unwrap()]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["n_passed"], 6);
    for inst in report["instances"].as_array().unwrap() {
        for key in ["equivalence_deviation", "bound_violation", "tightness_gap", "telescoping_deviation", "passed"] {
            assert!(inst.get(key).is_some(), "missing {key}");
        }
    }
}

#[test]
fn sir_bank_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bank");
    let b = dir.path().join("b.bank");
    for p in [&a, &b] {
        ok(&seqdesign(&["gen-sir-bank", "--n", "100", "--seed", "5", "--out", p.to_str().unwrap()]));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let bank = SimBank::load(&a).unwrap();
    assert_eq!(bank.len(), 100);
}
