use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn smoke_config(out: &Path) -> Value {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json")).unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["out_dir"] = json!(out);
    v["seeds"] = json!([1]);
    v["corruption"]["kinds"] = json!(["gaussian_noise"]);
    v
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn uninfo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uninfo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for i in 0..2 {
        let out = tmp.path().join(format!("out{i}"));
        let cfg = write_config(tmp.path(), &format!("c{i}.json"), &smoke_config(&out));
        let o = uninfo(&["run", "--config", s(&cfg)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for rel in [
        "runs/full/gaussian_noise/seed1/metrics.csv",
        "runs/full/gaussian_noise/seed1/checkpoint/tensors.bin",
        "runs/full/summary.csv",
    ] {
        let a = fs::read(outs[0].join(rel)).unwrap();
        let b = fs::read(outs[1].join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs");
    }
    let header = fs::read_to_string(outs[0].join("runs/full/gaussian_noise/seed1/metrics.csv")).unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        "step,loss_ent,loss_unif,loss_pl,mi,w,acc_teacher,acc_student,uniformity_metric,marginal_entropy"
    );
}

#[test]
fn corrupt_rerun_hits_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = smoke_config(&tmp.path().join("out"));
    v["seeds"] = json!([1, 2]);
    v["corruption"]["kinds"] = json!(["gaussian_noise", "defocus_blur"]);
    let cfg = write_config(tmp.path(), "c.json", &v);
    let first = uninfo(&["corrupt", "--config", s(&cfg)]);
    assert!(first.status.success());
    let text = String::from_utf8(first.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with("written")).count(), 4);
    let second = uninfo(&["corrupt", "--config", s(&cfg)]);
    let text = String::from_utf8(second.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.ends_with("cached")).count(), 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(uninfo(&["run", "--config", s(&bad)]).status.code(), Some(2));

    let mut v = smoke_config(&out);
    v["seeds"] = json!([]);
    let cfg = write_config(tmp.path(), "noseeds.json", &v);
    assert_eq!(uninfo(&["run", "--config", s(&cfg)]).status.code(), Some(2));

    let mut v = smoke_config(&out);
    v["dataset"] = json!({ "path": "/definitely/missing/data" });
    let cfg = write_config(tmp.path(), "missing.json", &v);
    let o = uninfo(&["corrupt", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/missing/data"));

    let spca = tmp.path().join("spca.csv");
    fs::write(&spca, "set,x,y\nimage,2,0\n").unwrap();
    let o = uninfo(&["plot", "--what", "spca", "--out", s(&tmp.path().join("x.svg")), s(&spca)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn divergence_exits_4_with_state_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut v = smoke_config(&out);
    v["tta"]["lr"] = json!(1e30);
    let cfg = write_config(tmp.path(), "c.json", &v);
    let o = uninfo(&["run", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let dump = out.join("runs/full/gaussian_noise/seed1/failure");
    assert!(dump.join("state.json").is_file());
    assert!(dump.join("checkpoint/manifest.json").is_file());
}

#[test]
fn sweep_dedups_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &smoke_config(&out));
    let o = uninfo(&["sweep", "--config", s(&cfg), "--param", "i0", "--values", "0.5,2,0.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("sweep_i0.csv");
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3);
    let svg = tmp.path().join("sweep.svg");
    let o = uninfo(&["plot", "--what", "sweep", "--out", s(&svg), s(&csv)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&svg).unwrap().matches(r#"class="point""#).count(), 2);
}

#[test]
fn preset_and_seed_flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "c.json", &smoke_config(&out));
    let o = uninfo(&["run", "--config", s(&cfg), "--preset", "ent_only", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("runs/ent_only/gaussian_noise/seed9/metrics.csv").is_file());
    let o = uninfo(&["run", "--config", s(&cfg), "--preset", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}
