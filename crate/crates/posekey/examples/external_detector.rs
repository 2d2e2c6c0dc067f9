//! Scores images through an external pose detector instead of the
//! built-in extractor. The detector is any executable speaking the
//! line protocol: one image path per line on stdin, one JSON record
//! `{"image": ..., "keypoints": [[x, y, v], ...]}` per line on stdout.
//!
//! This example writes a small shell stub that echoes fixed keypoints,
//! which stands in for a real detector such as a pose-estimation CLI.
//!
//! Run with `cargo run --example external_detector`.

use posekey::detector::{AdapterConfig, DetectorHandle};
use posekey::skeleton::{mean_joint_distance_px, normalize_keypoints, SkeletonTopology};
use posekey::synth::{joint_palette, make_posture_bank, render_posture, save_png};

fn io_err(path: &std::path::Path, source: std::io::Error) -> posekey::Error {
    posekey::Error::Io { path: path.to_path_buf(), source }
}

fn main() -> posekey::Result<()> {
    let root = std::env::temp_dir().join("posekey-examples/external_detector");
    std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
    let topo = SkeletonTopology::human15();
    let palette = joint_palette(topo.joint_count());
    let bank = make_posture_bank(3, 11, &topo)?;

    // Render the canonical postures; these are the images to score.
    let size = 96u32;
    let mut images = Vec::new();
    for spec in &bank {
        let path = root.join(format!("class{}.png", spec.class_id));
        save_png(&path, &render_posture(&spec.pose, &topo, &palette, size)?)?;
        images.push(path);
    }

    // Stub detector: replies with class 0's true pixel keypoints no
    // matter which image it is asked about.
    let truth = posekey::skeleton::denormalize_keypoints(&bank[0].pose, (size, size))?;
    let joints: Vec<String> = truth
        .coords()
        .iter()
        .map(|&[x, y]| format!("[{x:.3}, {y:.3}, 1.0]"))
        .collect();
    let record = format!("{{\"image\": \"any\", \"keypoints\": [{}]}}", joints.join(", "));
    let script = root.join("stub.sh");
    std::fs::write(&script, format!("while read line; do printf '%s\\n' '{record}'; done\n"))
        .map_err(|e| io_err(&script, e))?;

    // Identity index map: the stub already emits the 15-joint order.
    // `AdapterConfig::mediapipe33` is the preset for 33-landmark output.
    let cfg = AdapterConfig::identity(
        vec!["sh".into(), script.display().to_string()],
        topo.joint_count(),
    );
    let mut handle = DetectorHandle::spawn(cfg)?;
    for (spec, path) in bank.iter().zip(&images) {
        let detected = handle.detect(path)?;
        let (normalized, _) = normalize_keypoints(&detected, (size, size))?;
        let err = mean_joint_distance_px(&normalized, &spec.pose, size)
            .expect("stub marks all joints visible");
        println!(
            "class {}: detector error {err:7.2} px {}",
            spec.class_id,
            if spec.class_id == 0 { "(stub matches this class exactly)" } else { "" }
        );
    }
    println!("protocol: path in, one-line JSON out; see AdapterConfig for index maps");
    Ok(())
}
