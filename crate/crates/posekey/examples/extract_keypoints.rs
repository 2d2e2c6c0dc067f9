//! Round-trips poses through the renderer and the differentiable
//! soft-argmax extractor: render a known pose, extract keypoints back
//! out of the pixels, and measure the pixel error against ground truth.
//!
//! Run with `cargo run --example extract_keypoints`.

use posekey::extract::{extract_pose, ExtractConfig};
use posekey::skeleton::{mean_joint_distance_px, SkeletonTopology};
use posekey::synth::{jitter_posture, joint_palette, make_posture_bank, render_posture};

fn main() -> posekey::Result<()> {
    let size = 128u32;
    let topo = SkeletonTopology::human15();
    let palette = joint_palette(topo.joint_count());
    let cfg = ExtractConfig::default();
    let bank = make_posture_bank(8, 3, &topo)?;

    println!("extracting from {} rendered postures at {size} px", bank.len());
    let mut worst = 0.0f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for spec in &bank {
        // one canonical render plus one jittered variant per class
        for (tag, pose) in
            [("canonical", spec.pose.clone()), ("jittered", jitter_posture(spec, 1000 + spec.class_id as u64))]
        {
            let img = render_posture(&pose, &topo, &palette, size)?;
            let extracted = extract_pose(&img, &palette, &cfg)?;
            // both poses are normalized; the helper scales to pixels
            let err = mean_joint_distance_px(&extracted, &pose, size)
                .expect("all joints visible on clean renders");
            println!("  class {} {:9}  mean error {err:.3} px", spec.class_id, tag);
            worst = worst.max(err);
            total += err;
            count += 1;
        }
    }
    println!("mean over {count} renders: {:.3} px, worst {worst:.3} px", total / count as f64);
    Ok(())
}
