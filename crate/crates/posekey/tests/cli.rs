//! End-to-end tests of the command-line binary: spawn the real
//! executable, drive the documented flags, and check files and exit
//! codes. Training configs here are deliberately tiny so the whole
//! suite stays fast.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posekey"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

/// Generates a tiny dataset under `root/dataset` and returns its path.
fn tiny_dataset(root: &Path) -> PathBuf {
    run_ok(&[
        "synth-data",
        "--out-dir",
        root.to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        "5",
        "--image-size",
        "32",
        "--seed",
        "11",
    ]);
    root.join("dataset")
}

/// Small-architecture training config so CLI-driven runs stay quick.
fn write_train_config(path: &Path, model: &str, dataset: &Path, epochs: u64) {
    let text = format!(
        "model_kind = \"{model}\"\n\
         dataset = \"{}\"\n\
         epochs = {epochs}\n\
         batch_size = 4\n\
         t_count = 8\n\
         base_channels = 4\n\
         z_dim = 8\n\
         label_dim = 4\n\
         hidden = [16, 32]\n\
         eval_samples = 2\n\
         eval_sample_steps = 4\n\
         checkpoint_every = 50\n",
        dataset.display()
    );
    std::fs::write(path, text).unwrap();
}

#[test]
fn help_lists_every_documented_flag() {
    let expectations: [(&str, &[&str]); 5] = [
        (
            "synth-data",
            &["--config", "--out-dir", "--classes", "--per-class", "--image-size", "--seed"],
        ),
        (
            "train",
            &[
                "--config",
                "--out-dir",
                "--model",
                "--dataset",
                "--epochs",
                "--seed",
                "--image-size",
                "--lambda-kp",
                "--lambda-pose",
            ],
        ),
        (
            "sample",
            &[
                "--config",
                "--out-dir",
                "--checkpoint",
                "--n-samples",
                "--steps",
                "--guidance",
                "--seed",
            ],
        ),
        (
            "eval",
            &[
                "--config",
                "--out-dir",
                "--checkpoint",
                "--dataset",
                "--n-samples",
                "--steps",
                "--adapter-cmd",
                "--extractor",
                "--extractor-epochs",
                "--seed",
            ],
        ),
        ("report", &["--config", "--out-dir", "--report", "--extra-rows"]),
    ];
    for (sub, flags) in expectations {
        let out = run_ok(&[sub, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help is missing {flag}\n{text}");
        }
    }
}

#[test]
fn usage_errors_exit_2_with_category() {
    let dir = tempfile::tempdir().unwrap();
    // unknown flag
    assert_eq!(exit_code(&["synth-data", "--frobnicate"]), 2);
    // missing dataset file
    let out = bin()
        .args([
            "train",
            "--model",
            "cgan",
            "--dataset",
            dir.path().join("nowhere").to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code().unwrap(), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error[usage]:"), "{stderr}");
    assert!(stderr.contains("missing file"), "{stderr}");
    // config parse error
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "model_kind = \"cgan\"\nnot really toml ===").unwrap();
    assert_eq!(
        exit_code(&["train", "--config", bad.to_str().unwrap()]),
        2,
        "malformed config must be a usage error"
    );
    // missing checkpoint
    assert_eq!(
        exit_code(&[
            "eval",
            "--checkpoint",
            dir.path().join("none.ckpt").to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]),
        2
    );
}

#[test]
fn synth_data_is_seed_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ds_a = tiny_dataset(a.path());
    let ds_b = tiny_dataset(b.path());
    run_ok(&[
        "synth-data",
        "--out-dir",
        c.path().to_str().unwrap(),
        "--classes",
        "2",
        "--per-class",
        "5",
        "--image-size",
        "32",
        "--seed",
        "12",
    ]);
    let manifest = |p: &Path| std::fs::read(p.join("manifest.csv")).unwrap();
    assert_eq!(manifest(&ds_a), manifest(&ds_b), "same seed, same manifest");
    let first_png = |p: &Path| {
        let images = p.join("images");
        let name = std::fs::read_dir(&images)
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .min()
            .unwrap();
        std::fs::read(images.join(name)).unwrap()
    };
    assert_eq!(first_png(&ds_a), first_png(&ds_b));
    // the manifest layout is seed independent; the poses are not
    let poses = |p: &Path| std::fs::read(p.join("poses.jsonl")).unwrap();
    assert_eq!(poses(&ds_a), poses(&ds_b));
    assert_ne!(
        poses(&ds_a),
        poses(&c.path().join("dataset")),
        "different seed, different poses"
    );
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["synth-data", "--classes", "2", "--per-class", "3", "--image-size", "32"])
        .env("POSEKEY_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("dataset").join("manifest.csv").exists());
}

/// Strips the wall-clock column so log comparisons see only the losses.
fn strip_wall_ms(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rsplit_once(',') {
            Some((rest, _)) => rest.to_string(),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn pose_model_with_zero_weights_matches_baseline_logs() {
    let root = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(root.path());
    let cfg = root.path().join("train.toml");
    write_train_config(&cfg, "cgan", &dataset, 1);

    let base_dir = root.path().join("base");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        base_dir.to_str().unwrap(),
    ]);
    let pose_dir = root.path().join("pose");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        "cgan_pose",
        "--lambda-kp",
        "0",
        "--lambda-pose",
        "0",
        "--out-dir",
        pose_dir.to_str().unwrap(),
    ]);

    let base_log = std::fs::read_to_string(base_dir.join("cgan/run_log.csv")).unwrap();
    let pose_log = std::fs::read_to_string(pose_dir.join("cgan_pose/run_log.csv")).unwrap();
    assert_eq!(strip_wall_ms(&base_log), strip_wall_ms(&pose_log));
}

#[test]
fn flag_overrides_beat_config_values() {
    let root = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(root.path());
    let cfg = root.path().join("train.toml");
    // config says 1 epoch; the flag asks for 0 and must win
    write_train_config(&cfg, "cgan", &dataset, 1);
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "0",
        "--out-dir",
        root.path().to_str().unwrap(),
    ]);
    let snapshot: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.path().join("cgan/config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(snapshot["epochs"], 0);
    assert!(root.path().join("cgan/ckpt_final.ckpt").exists());
}

/// Trains all four configurations for zero epochs: checkpoints exist in
/// seconds and still exercise the full eval path.
fn four_checkpoints(root: &Path, dataset: &Path) -> Vec<PathBuf> {
    let cfg = root.join("train.toml");
    let mut paths = Vec::new();
    for model in ["cgan", "cgan_pose", "cdiff", "cdiff_pose"] {
        write_train_config(&cfg, model, dataset, 0);
        let run_root = root.join("runs");
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            run_root.to_str().unwrap(),
        ]);
        paths.push(run_root.join(model).join("ckpt_final.ckpt"));
    }
    paths
}

#[test]
fn eval_on_four_checkpoints_builds_table1_in_order() {
    let root = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(root.path());
    let ckpts = four_checkpoints(root.path(), &dataset);

    let eval_dir = root.path().join("eval");
    let mut args: Vec<String> = vec!["eval".into()];
    // scrambled order on the command line; the table must still come
    // out in the canonical order
    for idx in [2usize, 0, 3, 1] {
        args.push("--checkpoint".into());
        args.push(ckpts[idx].display().to_string());
    }
    args.extend(
        [
            "--dataset",
            dataset.to_str().unwrap(),
            "--out-dir",
            eval_dir.to_str().unwrap(),
            "--n-samples",
            "3",
            "--steps",
            "2",
            "--extractor-epochs",
            "1",
        ]
        .map(String::from),
    );
    let argrefs: Vec<&str> = args.iter().map(String::as_str).collect();
    run_ok(&argrefs);

    let table1 = std::fs::read_to_string(eval_dir.join("table1.csv")).unwrap();
    let lines: Vec<&str> = table1.lines().collect();
    assert_eq!(lines.len(), 5, "header plus exactly four rows:\n{table1}");
    let models: Vec<&str> =
        lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["cgan", "cgan_pose", "cdiff", "cdiff_pose"]);
    for model in &models {
        assert!(eval_dir.join(format!("eval_{model}.json")).exists());
    }
    assert!(eval_dir.join("per_class_metrics.csv").exists());
    assert!(eval_dir.join("per_class_fid.png").exists());

    // byte-identical rerun: the cached extractor and fixed seeds must
    // reproduce every table exactly
    let before = std::fs::read(eval_dir.join("table1.csv")).unwrap();
    let json_before = std::fs::read(eval_dir.join("eval_cgan.json")).unwrap();
    run_ok(&argrefs);
    assert_eq!(before, std::fs::read(eval_dir.join("table1.csv")).unwrap());
    assert_eq!(json_before, std::fs::read(eval_dir.join("eval_cgan.json")).unwrap());

    // the report subcommand regenerates the tables from the JSONs alone
    let report_dir = root.path().join("report");
    run_ok(&[
        "report",
        "--report",
        eval_dir.join("eval_cdiff.json").to_str().unwrap(),
        "--report",
        eval_dir.join("eval_cgan.json").to_str().unwrap(),
        "--out-dir",
        report_dir.to_str().unwrap(),
    ]);
    let table1 = std::fs::read_to_string(report_dir.join("table1.csv")).unwrap();
    let models: Vec<&str> =
        table1.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["cgan", "cdiff"]);
}

#[test]
fn sample_writes_a_grid_per_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(root.path());
    let cfg = root.path().join("train.toml");
    write_train_config(&cfg, "cgan", &dataset, 0);
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        root.path().to_str().unwrap(),
    ]);
    run_ok(&[
        "sample",
        "--checkpoint",
        root.path().join("cgan/ckpt_final.ckpt").to_str().unwrap(),
        "--out-dir",
        root.path().to_str().unwrap(),
        "--n-samples",
        "3",
    ]);
    let grid = root.path().join("samples/grid_cgan.png");
    let img = image::open(&grid).unwrap();
    // 3 rows of samples by 2 classes at 32 px
    assert_eq!((img.width(), img.height()), (2 * 32, 3 * 32));
    assert!(root.path().join("samples/sample_config_cgan.json").exists());
}

#[test]
fn adapter_cmd_rescores_keypoints_through_external_detector() {
    let root = tempfile::tempdir().unwrap();
    let dataset = tiny_dataset(root.path());
    let cfg = root.path().join("train.toml");
    write_train_config(&cfg, "cgan", &dataset, 0);
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        root.path().to_str().unwrap(),
    ]);

    // stub detector: every joint at the image center, fully visible
    let pts: Vec<String> = (0..15).map(|_| "[16.0, 16.0, 1.0]".to_string()).collect();
    let record = format!("{{\"image\": \"x\", \"keypoints\": [{}]}}", pts.join(", "));
    let script = root.path().join("stub_detector.sh");
    std::fs::write(&script, format!("while read line; do printf '%s\\n' '{record}'; done\n"))
        .unwrap();

    let eval_dir = root.path().join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        root.path().join("cgan/ckpt_final.ckpt").to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--out-dir",
        eval_dir.to_str().unwrap(),
        "--n-samples",
        "2",
        "--extractor-epochs",
        "1",
        "--adapter-cmd",
        &format!("sh {}", script.display()),
    ]);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval_dir.join("eval_cgan.json")).unwrap(),
    )
    .unwrap();
    let source = report["meta"]["kp_source"].as_str().unwrap();
    assert!(source.starts_with("external adapter:"), "{source}");
    assert!(report["mean_kp_err_px"].as_f64().is_some());
    assert_eq!(report["kp_missing"], 0);
}
