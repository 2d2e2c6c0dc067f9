//! Loads a checkpoint and lays sampled images out as a class-by-sample
//! grid PNG. Trains a quick GAN first so the example is self-contained.
//!
//! Run with `cargo run --release --example sample_grid`.

use ndarray::{s, Array3};
use posekey::eval::Sampler;
use posekey::seeding::{rng_from, tag};
use posekey::synth::{generate_dataset, save_png, SynthConfig};
use posekey::train::{train, ModelKind, TrainConfig};

fn main() -> posekey::Result<()> {
    let root = std::env::temp_dir().join("posekey-examples/sample_grid");
    let data_dir = root.join("dataset");
    generate_dataset(&data_dir, &SynthConfig { num_classes: 5, per_class: 20, image_size: 32, seed: 2 })?;

    let mut cfg = TrainConfig::new(ModelKind::Cgan, data_dir, 8);
    cfg.hidden = vec![64, 128];
    cfg.z_dim = 32;
    cfg.label_dim = 16;
    cfg.batch_size = 16;
    let outcome = train(&cfg, &root.join("run"))?;

    let sampler = Sampler::from_checkpoint(&outcome.checkpoint)?;
    let classes = sampler.num_classes();
    let size = sampler.image_size() as usize;
    let rows = 4usize;

    // Columns are classes, rows are independent samples of that class.
    let mut grid = Array3::<f32>::zeros((3, rows * size, classes * size));
    for class in 0..classes {
        // per-class streams keep the grid stable if a class is resampled
        let mut rng = rng_from(cfg.seed, &[tag::SAMPLE, class as u64]);
        let batch = sampler.sample(&vec![class; rows], None, None, &mut rng)?;
        for row in 0..rows {
            grid.slice_mut(s![.., row * size..(row + 1) * size, class * size..(class + 1) * size])
                .assign(&batch.slice(s![row, .., .., ..]));
        }
    }

    let out = root.join("grid_cgan.png");
    save_png(&out, &grid)?;
    println!("model        {}", sampler.kind().as_str());
    println!("grid         {rows} samples x {classes} classes at {size} px");
    println!("wrote        {}", out.display());
    Ok(())
}
