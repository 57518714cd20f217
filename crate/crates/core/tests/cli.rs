//! End-to-end behaviour of the `ltds` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ltds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltds")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen-data", "--config", "tiny", "--out", p(dir)];
    args.extend_from_slice(extra);
    let o = ltds(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_manifest_and_is_byte_stable() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, &[]);
    gen(&b, &[]);
    for f in ["samples.csv", "embeddings.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    let c = t.path().join("c");
    gen(&c, &["--seed", "1"]);
    assert_ne!(fs::read(a.join("samples.csv")).unwrap(), fs::read(c.join("samples.csv")).unwrap());
}

#[test]
fn infeasible_budget_names_the_field() {
    let t = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/tiny.json")).unwrap();
    cfg["data"]["tail_domain_budget"]["tail"] = 0.into();
    let path = t.path().join("bad.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = ltds(&["gen-data", "--config", p(&path), "--out", p(&t.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tail_domain_budget.tail"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(ltds(&["nope"]).status.code(), Some(2));
    assert_eq!(ltds(&["train", "--meta-mode", "second_order"]).status.code(), Some(2));
    let t = tempfile::tempdir().unwrap();
    let o = ltds(&["train", "--config", "tiny", "--ablation", "row_z", "--data", p(t.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row"), "{}", stderr(&o));
    let o = ltds(&["train", "--config", p(&t.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_field_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/tiny.json")).unwrap();
    cfg["train"]["beta3"] = 0.1.into();
    let path = t.path().join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let o = ltds(&["gen-data", "--config", p(&path), "--out", p(&t.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta3"), "{}", stderr(&o));
}

#[test]
fn train_resume_reproduces_the_uninterrupted_trace() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &[]);
    let (full, part) = (t.path().join("full"), t.path().join("part"));
    let o = ltds(&["train", "--config", "tiny", "--data", p(&data), "--out", p(&full)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = ltds(&["train", "--config", "tiny", "--data", p(&data), "--out", p(&part), "--max-steps", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck = part.join("checkpoint.json");
    let o = ltds(&["train", "--config", "tiny", "--data", p(&data), "--out", p(&part), "--resume", p(&ck)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = fs::read_to_string(full.join("steps.jsonl")).unwrap();
    let b = fs::read_to_string(part.join("steps.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 20);
    assert_eq!(a, b);
    assert_eq!(fs::read(full.join("checkpoint.json")).unwrap(), fs::read(part.join("checkpoint.json")).unwrap());
}

#[test]
fn intermediate_checkpoints_follow_the_interval() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, &[]);
    let mut cfg: serde_json::Value = serde_json::from_str(include_str!("../../../configs/tiny.json")).unwrap();
    cfg["io"]["checkpoint_every"] = 8.into();
    cfg["train"]["eval_every"] = 5.into();
    let path = t.path().join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = t.path().join("run");
    let o = ltds(&["train", "--config", p(&path), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("checkpoint_step8.json").exists());
    assert!(out.join("checkpoint_step16.json").exists());
    assert!(!out.join("checkpoint_step20.json").exists());
    let h: serde_json::Value = serde_json::from_slice(&fs::read(out.join("history.json")).unwrap()).unwrap();
    let steps: Vec<u64> = h["history"].as_array().unwrap().iter().map(|x| x["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, [5, 10, 15, 20]);
}

#[test]
fn eval_checks_the_dataset_hash() {
    let t = tempfile::tempdir().unwrap();
    let (d0, d1) = (t.path().join("d0"), t.path().join("d1"));
    gen(&d0, &[]);
    gen(&d1, &["--seed", "1"]);
    let run = t.path().join("run");
    let o = ltds(&["train", "--config", "tiny", "--data", p(&d0), "--out", p(&run), "--ablation", "b"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ck = run.join("checkpoint.json");

    let out = t.path().join("eval");
    let o = ltds(&["eval", "--config", "tiny", "--data", p(&d0), "--checkpoint", p(&ck), "--out", p(&out), "--threshold", "0.3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["threshold"], 0.3);
    assert_eq!(m["heldout_domain"], 4);
    for k in ["acc_u", "acc", "h"] {
        let v = m[k].as_f64().unwrap();
        assert!((0.0..=100.0).contains(&v), "{k} = {v}");
    }

    let o = ltds(&["eval", "--config", "tiny", "--seed", "1", "--data", p(&d1), "--checkpoint", p(&ck)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_sign() {
    let o = ltds(&["gradcheck", "--points", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.matches("pass").count(), 5, "{table}");

    let o = ltds(&["gradcheck", "--points", "3", "--inject-sign-flip", "z2s"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("worst offender z2s"), "{}", stderr(&o));

    let o = ltds(&["gradcheck", "--points", "3", "--tol", "1e-300"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ablate_emits_one_line_per_row() {
    let t = tempfile::tempdir().unwrap();
    let o = ltds(&["ablate", "--config", "tiny", "--rows", "a,j", "--seeds", "1", "--out", p(t.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(t.path().join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("row,"));
    assert!(lines[1].starts_with("a,ce,0,0,0,0,0,"));
    assert!(lines[2].starts_with("j,dc,1,1,1,1,1,"));
    assert_eq!(String::from_utf8_lossy(&o.stdout), csv);

    let again = ltds(&["ablate", "--config", "tiny", "--rows", "a,j", "--seeds", "1"]);
    assert_eq!(again.stdout, o.stdout);

    assert_eq!(ltds(&["ablate", "--config", "tiny", "--rows", "a,q"]).status.code(), Some(2));
}
