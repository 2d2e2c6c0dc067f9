//! Generates a small labeled posture dataset, reloads it from disk, and
//! prints a summary of what landed where.
//!
//! Run with `cargo run --example synth_dataset`.

use posekey::synth::{generate_dataset, load_dataset, Split, SynthConfig};

fn main() -> posekey::Result<()> {
    let out = std::env::temp_dir().join("posekey-examples/synth_dataset/dataset");
    let cfg = SynthConfig { num_classes: 6, per_class: 20, image_size: 64, seed: 7 };
    generate_dataset(&out, &cfg)?;

    // Everything below works off the on-disk copy alone.
    let dataset = load_dataset(&out)?;
    println!("dataset root      {}", dataset.root.display());
    println!("classes           {}", dataset.meta.num_classes);
    println!("images            {}", dataset.len());
    println!(
        "train / val       {} / {}",
        dataset.indices_for(Split::Train).len(),
        dataset.indices_for(Split::Val).len()
    );
    println!("image size        {} px", dataset.meta.image_size);
    println!("joints per pose   {}", dataset.meta.joint_count);

    for spec in &dataset.bank {
        let pelvis = spec.pose.coords()[0];
        println!(
            "  class {} ({}) canonical pelvis at ({:.3}, {:.3})",
            spec.class_id, spec.name, pelvis[0], pelvis[1]
        );
    }

    // Per-sample annotations: pixel-space keypoints aligned with the
    // manifest rows.
    let idx = 0;
    let entry = &dataset.entries[idx];
    let pose = &dataset.poses[idx];
    println!(
        "sample 0: {} class {} with {} visible joints",
        entry.image_path,
        entry.class_id,
        pose.visibility().iter().filter(|v| **v).count()
    );
    Ok(())
}
