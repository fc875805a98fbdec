use std::path::Path;
use std::process::Command;

fn alignfree(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_alignfree"))
        .args(args)
        .output()
        .expect("binary runs");
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 5] = ["input_size=64", "batch_size=4", "epochs=1", "learning_rate=0.001", "psr_iterations=1"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

#[test]
fn full_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let teacher = root.join("teacher");
    let student = root.join("student");
    let eval = root.join("eval");
    let vis = root.join("vis");
    let (d, t, s, e, v) = (
        data.to_str().unwrap(),
        teacher.to_str().unwrap(),
        student.to_str().unwrap(),
        eval.to_str().unwrap(),
        vis.to_str().unwrap(),
    );
    let manifest = data.join("manifest.jsonl");
    let m = manifest.to_str().unwrap();

    assert_eq!(alignfree(&with_small(&["gen-data", "--n", "12", "--size", "64", "--output-dir", d])), 0);
    assert!(manifest.exists());
    assert!(data.join("warps.json").exists());

    assert_eq!(alignfree(&with_small(&["train-teacher", "--manifest", m, "--output-dir", t])), 0);
    let teacher_ckpt = teacher.join("teacher.safetensors");
    assert!(teacher_ckpt.exists());
    let log = std::fs::read_to_string(teacher.join("loss_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "l_dist", "l_logit", "l_cls", "l_total"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let tc = teacher_ckpt.to_str().unwrap();

    assert_eq!(
        alignfree(&with_small(&["train-student", "--manifest", m, "--teacher", tc, "--output-dir", s])),
        0
    );
    let student_ckpt = student.join("student.safetensors");
    assert!(student_ckpt.exists());
    let resolved = std::fs::read_to_string(student.join("resolved_config.toml")).unwrap();
    assert!(resolved.contains("input_size = 64"));
    let index = read_json(&student.join("manifest.json"));
    assert!(index["artifacts"]["student.safetensors"]["sha256"].is_string());

    let sc = student_ckpt.to_str().unwrap();
    assert_eq!(
        alignfree(&with_small(&["evaluate", "--manifest", m, "--checkpoint", sc, "--teacher", tc, "--output-dir", e])),
        0
    );
    let metrics = read_json(&eval.join("metrics.json"));
    assert!(metrics["mean"]["acc"].is_number());
    assert!(eval.join("roc.csv").exists());
    assert!(eval.join("cam_overlays.png").exists());

    assert_eq!(
        alignfree(&with_small(&[
            "visualize", "--manifest", m, "--student", sc, "--teacher", tc, "--count", "2", "--output-dir", v
        ])),
        0
    );
    assert!(vis.join("cam_overlays.png").exists());
    assert_eq!(std::fs::read_dir(&vis).unwrap().filter(|e| {
        e.as_ref().unwrap().file_name().to_string_lossy().starts_with("semantic_")
    }).count(), 2);
}

#[test]
fn oracle_check_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(alignfree(&["oracle-check", "--seed", "3", "--output-dir", out]), 0);
    let report = read_json(&tmp.path().join("oracle.json"));
    assert!(report["relative_deviation"].as_f64().unwrap() < 1e-5);
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bad");
    let o = out.to_str().unwrap();
    assert_eq!(alignfree(&["oracle-check", "--output-dir", o, "tau1=0.9", "tau2=0.1"]), 2);
    assert_eq!(read_json(&out.join("error.json"))["exit_code"], 2);
    assert_eq!(alignfree(&["oracle-check", "--output-dir", o, "no_such_key=1"]), 2);
    assert_eq!(alignfree(&["train-teacher", "--manifest", "/nonexistent/manifest.jsonl", "--output-dir", o]), 3);
    assert_eq!(read_json(&out.join("error.json"))["exit_code"], 3);
    assert_eq!(alignfree(&["evaluate", "--output-dir", o]), 2);
    assert_eq!(alignfree(&["--help"]), 0);
}
