//! Trains a small pose-supervised conditional GAN for a few epochs and
//! prints the loss trajectory. Expect the keypoint term to shrink
//! first; the pose-consistency term is large and noisy early on because
//! incoherent generated skeletons have near-degenerate torsos, and it
//! settles only once the generator draws recognizable figures.
//!
//! Run with `cargo run --release --example train_cgan`.

use posekey::synth::{generate_dataset, SynthConfig};
use posekey::train::{train, ModelKind, TrainConfig};

fn main() -> posekey::Result<()> {
    let root = std::env::temp_dir().join("posekey-examples/train_cgan");
    let data_dir = root.join("dataset");
    generate_dataset(&data_dir, &SynthConfig { num_classes: 4, per_class: 25, image_size: 32, seed: 1 })?;

    let mut cfg = TrainConfig::new(ModelKind::CganPose, data_dir, 6);
    // shrink the MLPs so a desktop CPU finishes in seconds
    cfg.hidden = vec![64, 128];
    cfg.z_dim = 32;
    cfg.label_dim = 16;
    cfg.batch_size = 16;
    cfg.seed = 9;
    let run_dir = root.join("run");
    let outcome = train(&cfg, &run_dir)?;

    println!("step  l_adv     l_kp      l_pose    l_total");
    let steps = &outcome.log.steps;
    for rec in steps.iter().step_by(steps.len().div_ceil(12).max(1)) {
        println!(
            "{:4}  {:8.4}  {:8.4}  {:8.4}  {:8.4}",
            rec.step, rec.l_adv_or_recon, rec.l_kp, rec.l_pose, rec.l_total
        );
    }
    let first = steps.first().expect("non-empty log");
    let last = steps.last().expect("non-empty log");
    println!(
        "keypoint loss {:.4} -> {:.4} over {} steps",
        first.l_kp,
        last.l_kp,
        steps.len()
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("run log:    {}", run_dir.join("run_log.csv").display());
    Ok(())
}
