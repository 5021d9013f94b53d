//! End-to-end exercises of the installed binary: stage chaining, output
//! files, and exit codes.

use std::path::Path;
use std::process::Command;

fn dermpipe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dermpipe"))
}

fn run_ok(cmd: &mut Command) -> String {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn stagewise_chain_produces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let arg = |path: &Path| path.to_str().unwrap().to_string();

    let out = run_ok(dermpipe().args([
        "synth",
        "--out",
        &arg(&p("synth")),
        "--n-per-class",
        "10",
        "--image-size",
        "64",
        "--seed",
        "21",
    ]));
    assert!(out.contains("70 records"));

    let out = run_ok(dermpipe().args([
        "sample",
        "--manifest",
        &arg(&p("synth/synthetic.manifest")),
        "--anchor",
        "BCC",
        "--sets",
        "2",
        "--seed",
        "3",
        "--out",
        &arg(&p("sampled")),
    ]));
    assert!(out.contains("set 1"));
    assert!(out.contains("set 2"));
    assert!(p("sampled/dev.manifest").is_file());
    assert!(p("sampled/split_plan.json").is_file());

    let out = run_ok(dermpipe().args([
        "augment",
        "--manifest",
        &arg(&p("sampled/balanced_1.manifest")),
        "--out",
        &arg(&p("aug")),
    ]));
    // 9 per class after the 9:1 split: 5 classes x 8 + 2 classes x 12.
    assert!(out.contains("63 -> 576 records"), "got: {out}");

    run_ok(dermpipe().args([
        "train-seg",
        "--manifest",
        &arg(&p("synth/synthetic.manifest")),
        "--out",
        &arg(&p("seg")),
        "--spec",
        "desk",
        "--epochs",
        "1",
        "--seed",
        "4",
    ]));

    run_ok(dermpipe().args([
        "train-cls",
        "--manifest",
        &arg(&p("aug/augmented.manifest")),
        "--dev",
        &arg(&p("sampled/dev.manifest")),
        "--seg-checkpoint",
        &arg(&p("seg/seg.ckpt")),
        "--set-index",
        "1",
        "--out",
        &arg(&p("cls")),
        "--epochs",
        "1",
        "--seed",
        "4",
    ]));

    run_ok(dermpipe().args([
        "ensemble",
        "--checkpoints",
        &arg(&p("cls/cls_1.ckpt")),
        &arg(&p("cls/cls_1.ckpt")),
        "--dev",
        &arg(&p("sampled/dev.manifest")),
        "--target",
        &arg(&p("sampled/dev.manifest")),
        "--out",
        &arg(&p("ens")),
    ]));
    let predictions = std::fs::read_to_string(p("ens/predictions.csv")).unwrap();
    assert!(predictions.starts_with("image,MEL,NV,BCC,AKIEC,BKL,DF,VASC\n"));
    assert_eq!(predictions.lines().count(), 1 + 7);

    let out = run_ok(dermpipe().args([
        "evaluate",
        "--predictions",
        &arg(&p("ens/predictions_labels.csv")),
        "--manifest",
        &arg(&p("sampled/dev.manifest")),
    ]));
    assert!(out.contains("balanced accuracy"));

    let out =
        run_ok(dermpipe().args(["inspect-model", "--checkpoint", &arg(&p("cls/cls_1.ckpt"))]));
    assert!(out.contains("kind: Cls"));
    assert!(out.contains("encoder: growth 8"));
}

#[test]
fn run_all_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let arg = |path: &Path| path.to_str().unwrap().to_string();

    // Write the default config, shrink it, run it.
    run_ok(dermpipe().args([
        "run-all",
        "--out",
        &arg(&p("unused")),
        "--seed",
        "31",
        "--write-config",
        &arg(&p("config.json")),
    ]));
    let mut config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p("config.json")).unwrap()).unwrap();
    config["data"]["spec"]["n_per_class"] = 10.into();
    config["seg_train"]["epochs"] = 1.into();
    config["cls_train"]["epochs"] = 1.into();
    config["sampler"]["n_sets"] = 2.into();
    config["seg_data"]["max_images"] = 8.into();
    std::fs::write(p("config.json"), serde_json::to_string(&config).unwrap()).unwrap();

    let out = run_ok(dermpipe().args([
        "run-all",
        "--config",
        &arg(&p("config.json")),
        "--out",
        &arg(&p("run")),
    ]));
    assert!(out.contains("run complete"));
    assert!(p("run/run_manifest.json").is_file());

    let out = run_ok(dermpipe().args(["report", "--run", &arg(&p("run"))]));
    assert!(out.contains("reference full-scale run"));
}

#[test]
fn failures_exit_nonzero() {
    let status = dermpipe()
        .args([
            "evaluate",
            "--predictions",
            "/nonexistent",
            "--manifest",
            "/nonexistent",
        ])
        .output()
        .unwrap();
    assert!(!status.status.success());

    let status = dermpipe()
        .args(["inspect-model", "--checkpoint", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!status.status.success());

    // Unknown class code for --anchor.
    let dir = tempfile::tempdir().unwrap();
    let status = dermpipe()
        .args([
            "synth",
            "--out",
            dir.path().to_str().unwrap(),
            "--n-per-class",
            "0",
        ])
        .output()
        .unwrap();
    assert!(!status.status.success(), "n_per_class 0 must be rejected");
}
