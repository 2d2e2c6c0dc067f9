//! Trains a small pose-supervised conditional diffusion model. The
//! auxiliary losses act on the one-step denoised estimate, so they start
//! near the dataset statistics and tighten as the U-Net learns.
//!
//! Run with `cargo run --release --example train_diffusion`.

use posekey::synth::{generate_dataset, SynthConfig};
use posekey::train::{train, ModelKind, TrainConfig};

fn main() -> posekey::Result<()> {
    let root = std::env::temp_dir().join("posekey-examples/train_diffusion");
    let data_dir = root.join("dataset");
    generate_dataset(&data_dir, &SynthConfig { num_classes: 4, per_class: 25, image_size: 32, seed: 1 })?;

    let mut cfg = TrainConfig::new(ModelKind::CdiffPose, data_dir, 4);
    // shrink the schedule and the U-Net so the run takes seconds
    cfg.t_count = 50;
    cfg.base_channels = 8;
    cfg.batch_size = 16;
    cfg.eval_sample_steps = 10;
    cfg.seed = 9;
    let run_dir = root.join("run");
    let outcome = train(&cfg, &run_dir)?;

    println!("step  l_recon   l_kp      l_pose    l_total");
    let steps = &outcome.log.steps;
    for rec in steps.iter().step_by(steps.len().div_ceil(10).max(1)) {
        println!(
            "{:4}  {:8.4}  {:8.4}  {:8.4}  {:8.4}",
            rec.step, rec.l_adv_or_recon, rec.l_kp, rec.l_pose, rec.l_total
        );
    }
    let first = steps.first().expect("non-empty log");
    let last = steps.last().expect("non-empty log");
    println!(
        "reconstruction loss {:.4} -> {:.4} over {} steps",
        first.l_adv_or_recon,
        last.l_adv_or_recon,
        steps.len()
    );
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}
