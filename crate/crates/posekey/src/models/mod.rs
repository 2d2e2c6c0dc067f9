//! The two conditional generator families and their shared pieces.
//!
//! [`cgan`] holds the fully connected generator/discriminator pair,
//! [`unet`] the conditional denoising U-Net, and [`diffusion`] the DDPM
//! schedule, forward process, and samplers.

pub mod cgan;
pub mod diffusion;
pub mod unet;

use crate::error::{Error, Result};

/// Standard interleaved sin/cos positional embedding of a timestep at
/// geometrically spaced frequencies with base 10000: entry `2i` is
/// `sin(t * w_i)`, entry `2i+1` is `cos(t * w_i)`.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Vec<f32>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Argument(format!("embedding dim must be even and positive, got {dim}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin() as f32;
        out[2 * i + 1] = angle.cos() as f32;
    }
    Ok(out)
}

/// Batched version: one row per timestep, `[B, dim]`.
pub fn sinusoidal_time_embedding_batch(ts: &[usize], dim: usize) -> Result<ndarray::Array2<f32>> {
    let mut out = ndarray::Array2::<f32>::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        let emb = sinusoidal_time_embedding(t, dim)?;
        for (col, v) in emb.into_iter().enumerate() {
            out[[row, col]] = v;
        }
    }
    Ok(out)
}

/// Largest group count not above 8 that divides the channel count; keeps
/// GroupNorm valid for any width.
pub(crate) fn norm_groups(channels: usize) -> usize {
    let mut g = channels.min(8);
    while !channels.is_multiple_of(g) {
        g -= 1;
    }
    g
}
