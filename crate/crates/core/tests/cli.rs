use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn catpress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catpress"))
        .args(args)
        .env_remove("CATPRESS_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn plain9(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("plain9.json");
    let out = catpress(&[
        "arch",
        "new",
        "--template",
        "plain-resnet",
        "--base-channels",
        "64",
        "--blocks",
        "9",
        "--out",
        p(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn macs_of_plain_template_match_the_published_total() {
    let dir = tempfile::tempdir().unwrap();
    let arch = plain9(dir.path());
    let out = catpress(&["macs", "--arch", p(&arch), "--input", "3x256x256", "--json"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    let total = v["total"].as_u64().unwrap();
    assert!((total as f64 - 56.8e9).abs() <= 0.02 * 56.8e9, "{total}");
    let sum: u64 = v["layers"].as_array().unwrap().iter().map(|l| l["macs"].as_u64().unwrap()).sum();
    assert_eq!(sum, total);

    let text = catpress(&["macs", "--arch", p(&arch), "--input", "3x256x256"]);
    assert_eq!(code(&text), 0);
    assert!(String::from_utf8_lossy(&text.stdout).contains(&format!("total  {total}")));
}

#[test]
fn vacuous_budget_prunes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let arch = plain9(dir.path());
    let student = dir.path().join("student.json");
    let report = dir.path().join("report.json");
    let out = catpress(&[
        "prune",
        "--arch",
        p(&arch),
        "--budget-macs",
        "57G",
        "--input",
        "3x256x256",
        "--out",
        p(&student),
        "--report",
        p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["pruned_channels"], 0);
    assert_eq!(v["removed_branches"], 0);
    assert_eq!(v["threshold"], 0.0);
    assert_eq!(v["vacuous"], true);
    assert_eq!(stdout_json(&out), v);
    assert_eq!(fs::read_to_string(&student).unwrap(), fs::read_to_string(&arch).unwrap());
}

#[test]
fn infeasible_budget_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let arch = plain9(dir.path());
    let out = catpress(&[
        "prune",
        "--arch",
        p(&arch),
        "--budget-macs",
        "1",
        "--floor",
        "8",
        "--out",
        p(&dir.path().join("s.json")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn budget_suffixes_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let arch = plain9(dir.path());
    let out = catpress(&[
        "prune",
        "--arch",
        p(&arch),
        "--budget-macs",
        "30G",
        "--out",
        p(&dir.path().join("s.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["target_macs"], 30_000_000_000u64);
    assert!(v["achieved_macs"].as_u64().unwrap() <= 30_000_000_000);
}

#[test]
fn usage_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&catpress(&["macs"])), 1);
    assert_eq!(code(&catpress(&["no-such-command"])), 1);
    assert_eq!(code(&catpress(&["macs", "--arch", "/nonexistent/arch.json", "--input", "3x8x8"])), 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let out = catpress(&["macs", "--arch", p(&bad), "--input", "3x8x8"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));

    let arch = plain9(dir.path());
    let text = fs::read_to_string(&arch).unwrap().replacen("\"conv\"", "\"conv9d\"", 1);
    fs::write(&bad, text).unwrap();
    assert_eq!(code(&catpress(&["macs", "--arch", p(&bad), "--input", "3x8x8"])), 2);

    let threads = Command::new(env!("CARGO_BIN_EXE_catpress"))
        .args(["verify", "--json"])
        .env("CATPRESS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 1);
}

#[test]
fn verify_reports_every_check() {
    let out = catpress(&["verify", "--json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let v = stdout_json(&out);
    assert_eq!(v["ok"], true);
    let checks = v["checks"].as_array().unwrap();
    assert!(checks.len() >= 3);
    for c in checks {
        assert!(c["cases"].as_u64().unwrap() > 0, "{c}");
        assert_eq!(c["failures"], 0, "{c}");
    }
}

/// Strips wall-clock fields so reruns can be compared.
fn without_timing(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("wall_clock_s");
        o.remove("wall_clock_ms");
    }
    v
}

#[test]
fn pipeline_end_to_end_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = d.join("run.json");
    fs::write(&config, r#"{"n_train": 8, "n_val": 4, "image_size": 16, "batch_size": 4}"#).unwrap();
    let arch = d.join("teacher.json");
    let new = |out: &Path| {
        catpress(&[
            "arch",
            "new",
            "--template",
            "incres-resnet",
            "--base-channels",
            "6",
            "--blocks",
            "2",
            "--in-channels",
            "1",
            "--image-size",
            "16",
            "--out",
            p(out),
        ])
    };
    assert_eq!(code(&new(&arch)), 0);
    let again = d.join("teacher2.json");
    assert_eq!(code(&new(&again)), 0);
    assert_eq!(fs::read(&arch).unwrap(), fs::read(&again).unwrap());

    let teacher = |out: &Path| {
        catpress(&[
            "--config",
            p(&config),
            "train-teacher",
            "--arch",
            p(&arch),
            "--seed",
            "3",
            "--epochs",
            "1",
            "--out",
            p(out),
        ])
    };
    let t1 = teacher(&d.join("t1"));
    assert_eq!(code(&t1), 0, "{}", String::from_utf8_lossy(&t1.stderr));
    let t2 = teacher(&d.join("t2"));
    assert_eq!(without_timing(stdout_json(&t1)), without_timing(stdout_json(&t2)));
    for f in ["manifest.json", "weights.bin", "arch.json", "config.json"] {
        assert_eq!(fs::read(d.join("t1").join(f)).unwrap(), fs::read(d.join("t2").join(f)).unwrap(), "{f}");
    }
    let report = stdout_json(&t1);
    assert_eq!(report["seed"], 3);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 1);

    let macs = stdout_json(&catpress(&["macs", "--arch", p(&arch), "--input", "1x16x16", "--json"]));
    let budget = (macs["total"].as_u64().unwrap() / 2).to_string();
    let prune = |out: &Path| {
        catpress(&[
            "prune",
            "--teacher",
            p(&d.join("t1")),
            "--budget-macs",
            &budget,
            "--floor",
            "2",
            "--out",
            p(out),
        ])
    };
    let s1 = prune(&d.join("s1.json"));
    assert_eq!(code(&s1), 0, "{}", String::from_utf8_lossy(&s1.stderr));
    let s2 = prune(&d.join("s2.json"));
    assert_eq!(without_timing(stdout_json(&s1)), without_timing(stdout_json(&s2)));
    assert_eq!(fs::read(d.join("s1.json")).unwrap(), fs::read(d.join("s2.json")).unwrap());
    assert!(stdout_json(&s1)["achieved_macs"].as_u64().unwrap() <= budget.parse().unwrap());

    let student = |kd: &str, out: &Path| {
        catpress(&[
            "--config",
            p(&config),
            "train-student",
            "--teacher",
            p(&d.join("t1")),
            "--student-arch",
            p(&d.join("s1.json")),
            "--kd",
            kd,
            "--lambda-adv",
            "1",
            "--lambda-recon",
            "100",
            "--lambda-dist",
            "1",
            "--paired",
            "teacher",
            "--seed",
            "0",
            "--epochs",
            "1",
            "--out",
            p(out),
        ])
    };
    for kd in ["ka", "mse", "none"] {
        let out = student(kd, &d.join(kd));
        assert_eq!(code(&out), 0, "{kd}: {}", String::from_utf8_lossy(&out.stderr));
        let r = stdout_json(&out);
        assert!(r["final"]["l1"].as_f64().unwrap().is_finite());
    }
    let ka2 = student("ka", &d.join("ka2"));
    assert_eq!(code(&ka2), 0);
    assert_eq!(fs::read(d.join("ka/weights.bin")).unwrap(), fs::read(d.join("ka2/weights.bin")).unwrap());

    let ka_dir = d.join("ka");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--ckpt", p(&ka_dir), "--json"];
        args.extend_from_slice(extra);
        catpress(&args)
    };
    let e1 = eval(&[]);
    assert_eq!(code(&e1), 0, "{}", String::from_utf8_lossy(&e1.stderr));
    assert_eq!(e1.stdout, eval(&[]).stdout);
    let m = stdout_json(&e1);
    assert!(m["l1"].as_f64().unwrap() > 0.0 && m["psnr"].as_f64().unwrap() > 0.0);
    let other = stdout_json(&eval(&["--seed", "7"]));
    assert_ne!(m["l1"], other["l1"]);

    // the student checkpoint does not match the teacher's structure
    assert_eq!(code(&eval(&["--arch", p(&arch)])), 2);
    assert_eq!(code(&eval(&["--arch", p(&d.join("s1.json"))])), 0);
}
