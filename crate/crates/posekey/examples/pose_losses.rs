//! Shows the two auxiliary pose losses end to end on the autodiff
//! graph: soft-argmax keypoints from a generated batch, the keypoint
//! alignment loss against extracted targets, the relative
//! pose-consistency loss, and the gradient flowing back to the pixels.
//!
//! Run with `cargo run --example pose_losses`.

use ndarray::{Array4, Axis};
use posekey::autodiff::Graph;
use posekey::extract::{
    keypoint_loss_graph, pose_consistency_graph, pose_features_graph, soft_argmax_graph,
};
use posekey::skeleton::LossWeights;
use posekey::synth::{jitter_posture, make_posture_bank, render_posture};
use posekey::train::{extraction_targets, PoseSupervision};

fn main() -> posekey::Result<()> {
    let size = 64u32;
    let sup = PoseSupervision::standard();
    let bank = make_posture_bank(4, 5, &sup.topo)?;

    // "Real" targets: clean renders of jittered postures. In training
    // these come from the dataset batch paired with the generator input.
    let real: Vec<_> = bank
        .iter()
        .map(|spec| render_posture(&jitter_posture(spec, 42 + spec.class_id as u64), &sup.topo, &sup.palette, size))
        .collect::<posekey::Result<_>>()?;
    let mut real_batch = Array4::<f32>::zeros((real.len(), 3, size as usize, size as usize));
    for (i, img) in real.iter().enumerate() {
        real_batch.index_axis_mut(Axis(0), i).assign(img);
    }
    let targets = extraction_targets(&real_batch, &sup)?;

    // "Generated" batch: the canonical postures, differing from the
    // jittered targets, treated as a graph leaf so gradients reach it
    // the same way they reach a generator output.
    let mut gen_batch = real_batch.clone();
    for (i, spec) in bank.iter().enumerate() {
        let img = render_posture(&spec.pose, &sup.topo, &sup.palette, size)?;
        gen_batch.index_axis_mut(Axis(0), i).assign(&img);
    }

    let weights = LossWeights::new(1.0, 1.0)?;
    let mut g = Graph::new();
    let pixels = g.param(gen_batch.into_dyn());
    let extraction = soft_argmax_graph(&mut g, pixels, &sup.palette, &sup.extract)?;
    let l_kp = keypoint_loss_graph(&mut g, extraction.coords, &targets.coords, &targets.vis)?;
    let feats = pose_features_graph(&mut g, extraction.coords, &sup.topo)?;
    let l_pose = pose_consistency_graph(
        &mut g,
        &feats,
        &targets.ratios,
        &targets.angles,
        &targets.ratio_valid,
        &targets.angle_valid,
    )?;
    let total = g.weighted_sum(&[
        (l_kp, weights.lambda_kp as f32),
        (l_pose, weights.lambda_pose as f32),
    ])?;

    let mut grads = g.backward(total)?;
    let pixel_grad = grads.take(pixels).expect("pixels are a leaf");
    let grad_norm = pixel_grad.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let nonzero = pixel_grad.iter().filter(|v| **v != 0.0).count();

    println!("L_kp        {:.6}", g.value(l_kp).iter().next().unwrap());
    println!("L_pose      {:.6}", g.value(l_pose).iter().next().unwrap());
    println!("L_total     {:.6}", g.value(total).iter().next().unwrap());
    println!("pixel gradient: |g| = {grad_norm:.6}, {nonzero} nonzero entries");
    println!("every sampled pixel can move to shrink the pose losses");
    Ok(())
}
