//! Pose-aware conditional image generation for codified dance postures.
//!
//! The crate covers the full experiment loop: synthesizing a labeled
//! posture dataset, training conditional GAN and conditional diffusion
//! generators with optional keypoint and pose-consistency supervision,
//! extracting keypoints back out of images, and scoring runs with FID,
//! MS-SSIM, and keypoint error.

pub mod autodiff;
pub mod ckpt;
pub mod cli;
pub mod detector;
pub mod error;
pub mod eval;
pub mod extract;
pub mod models;
pub mod nn;
pub mod report;
pub mod seeding;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
