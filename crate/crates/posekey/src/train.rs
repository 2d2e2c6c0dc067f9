//! Training loop for the four model configurations: plain and
//! pose-supervised conditional GANs, and plain and pose-supervised
//! conditional diffusion. One codebase, two switches: the model family
//! and the pose-loss weights.
//!
//! All randomness is derived per step from the run seed, so an
//! interrupted run resumed from its last checkpoint replays the exact
//! loss sequence of an uninterrupted one.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::extract::{
    coordinate_targets, keypoint_loss_graph, pose_consistency_graph, pose_features_graph,
    soft_argmax_extract, soft_argmax_graph, ExtractConfig,
};
use crate::models::cgan::{logistic_d_loss, logistic_g_loss, CganConfig, GanPair};
use crate::models::diffusion::{
    ddpm_sample, diffusion_recon_loss, forward_diffuse, predict_x0_graph, DiffusionSchedule,
    SampleOptions,
};
use crate::models::unet::{Unet, UnetConfig};
use crate::nn::{Adam, Binder, ParamStore};
use crate::seeding::{rng_from, tag};
use crate::skeleton::{mean_joint_distance_px, relative_pose_features, LossWeights, Pose, SkeletonTopology};
use crate::synth::{joint_palette, load_dataset, Dataset, Split};

/// The four rows of the comparison: model family crossed with pose
/// supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cgan,
    CganPose,
    Cdiff,
    CdiffPose,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] =
        [ModelKind::Cgan, ModelKind::CganPose, ModelKind::Cdiff, ModelKind::CdiffPose];

    pub fn is_pose(self) -> bool {
        matches!(self, ModelKind::CganPose | ModelKind::CdiffPose)
    }

    pub fn is_diffusion(self) -> bool {
        matches!(self, ModelKind::Cdiff | ModelKind::CdiffPose)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cgan => "cgan",
            ModelKind::CganPose => "cgan_pose",
            ModelKind::Cdiff => "cdiff",
            ModelKind::CdiffPose => "cdiff_pose",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cgan" => Ok(ModelKind::Cgan),
            "cgan_pose" => Ok(ModelKind::CganPose),
            "cdiff" => Ok(ModelKind::Cdiff),
            "cdiff_pose" => Ok(ModelKind::CdiffPose),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?}; expected cgan, cgan_pose, cdiff, or cdiff_pose"
            ))),
        }
    }
}

fn default_batch_size() -> usize {
    10
}
fn default_learning_rate() -> f32 {
    2e-4
}
fn default_beta1() -> f32 {
    0.5
}
fn default_beta2() -> f32 {
    0.999
}
fn default_lambda() -> f64 {
    1.0
}
fn default_t_count() -> usize {
    1000
}
fn default_label_dropout() -> f32 {
    0.1
}
fn default_checkpoint_every() -> u64 {
    10
}
fn default_eval_samples() -> usize {
    8
}
fn default_eval_sample_steps() -> usize {
    20
}
fn default_base_channels() -> usize {
    64
}
fn default_z_dim() -> usize {
    128
}
fn default_label_dim() -> usize {
    64
}
fn default_hidden() -> Vec<usize> {
    vec![256, 512, 1024]
}

/// Run configuration, readable from a flat TOML file. Unknown keys are
/// rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    /// Dataset root directory (holding `manifest.csv` and friends).
    pub dataset: PathBuf,
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f32,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f32,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f32,
    #[serde(default = "default_lambda")]
    pub lambda_kp: f64,
    #[serde(default = "default_lambda")]
    pub lambda_pose: f64,
    #[serde(default)]
    pub seed: u64,
    /// Must match the dataset when set; inferred from the dataset when
    /// absent.
    #[serde(default)]
    pub image_size: Option<u32>,
    #[serde(default = "default_t_count")]
    pub t_count: usize,
    #[serde(default)]
    pub guidance_scale: f32,
    #[serde(default = "default_label_dropout")]
    pub label_dropout: f32,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    /// Images sampled for the per-checkpoint quality snapshot.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Respaced sampling steps used by diffusion snapshots.
    #[serde(default = "default_eval_sample_steps")]
    pub eval_sample_steps: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default = "default_label_dim")]
    pub label_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

impl TrainConfig {
    /// Configuration with every optional field at its default.
    pub fn new(model_kind: ModelKind, dataset: PathBuf, epochs: u64) -> Self {
        Self {
            model_kind,
            dataset,
            epochs,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            lambda_kp: default_lambda(),
            lambda_pose: default_lambda(),
            seed: 0,
            image_size: None,
            t_count: default_t_count(),
            guidance_scale: 0.0,
            label_dropout: default_label_dropout(),
            checkpoint_every: default_checkpoint_every(),
            eval_samples: default_eval_samples(),
            eval_sample_steps: default_eval_sample_steps(),
            base_channels: default_base_channels(),
            z_dim: default_z_dim(),
            label_dim: default_label_dim(),
            hidden: default_hidden(),
        }
    }

    pub fn from_toml_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} must lie in [0, 1)")));
            }
        }
        for (name, v) in [("lambda_kp", self.lambda_kp), ("lambda_pose", self.lambda_pose)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if self.t_count < 2 {
            return Err(Error::Config(format!("t_count {} must be at least 2", self.t_count)));
        }
        if !(0.0..1.0).contains(&self.label_dropout) {
            return Err(Error::Config(format!(
                "label_dropout {} must lie in [0, 1)",
                self.label_dropout
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.eval_samples == 0 || self.eval_sample_steps == 0 {
            return Err(Error::Config("eval snapshot settings must be positive".into()));
        }
        if self.guidance_scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance_scale {} must be nonnegative",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    /// Pose-loss weights after applying the model-kind switch: baseline
    /// configurations run with both weights at zero.
    pub fn effective_weights(&self) -> Result<LossWeights> {
        if self.model_kind.is_pose() {
            LossWeights::new(self.lambda_kp, self.lambda_pose)
        } else {
            LossWeights::new(0.0, 0.0)
        }
    }
}

/// Everything needed to compute pose losses during training.
#[derive(Debug, Clone)]
pub struct PoseSupervision {
    pub topo: SkeletonTopology,
    pub extract: ExtractConfig,
    /// Joint palette `[K, 3]` matching the renderer.
    pub palette: Array2<f32>,
}

impl PoseSupervision {
    /// The 15-joint skeleton with the standard extractor settings.
    pub fn standard() -> Self {
        let topo = SkeletonTopology::human15();
        let palette = joint_palette(topo.joint_count());
        Self { topo, extract: ExtractConfig::default(), palette }
    }
}

/// Batch-stacked supervision targets extracted from real images.
#[derive(Debug, Clone)]
pub struct PoseTargets {
    pub coords: Array3<f32>,
    pub vis: Array2<bool>,
    pub ratios: Array2<f32>,
    pub angles: Array2<f32>,
    pub ratio_valid: Array2<bool>,
    pub angle_valid: Array2<bool>,
}

/// Runs the frozen extractor over a real batch and packages coordinate
/// and relative-feature targets. A sample whose extraction degenerates
/// (torso invisible) contributes empty masks instead of failing the step.
pub fn extraction_targets(images: &Array4<f32>, sup: &PoseSupervision) -> Result<PoseTargets> {
    let b = images.shape()[0];
    let k = sup.topo.joint_count();
    let mut poses: Vec<Pose> = Vec::with_capacity(b);
    for i in 0..b {
        let img = images.index_axis(Axis(0), i).to_owned();
        poses.push(soft_argmax_extract(&img, &sup.palette, &sup.extract)?.pose);
    }
    let (coords, vis) = coordinate_targets(&poses)?;

    let nb = sup.topo.bones().len();
    let na = sup.topo.angle_triples().len();
    let mut ratios = Array2::<f32>::zeros((b, nb));
    let mut angles = Array2::<f32>::zeros((b, na));
    let mut ratio_valid = Array2::<bool>::from_elem((b, nb), false);
    let mut angle_valid = Array2::<bool>::from_elem((b, na), false);
    for (i, pose) in poses.iter().enumerate() {
        match relative_pose_features(pose, &sup.topo) {
            Ok(f) => {
                for j in 0..nb {
                    ratios[[i, j]] = f.bone_length_ratios[j] as f32;
                    ratio_valid[[i, j]] = f.ratio_valid[j];
                }
                for j in 0..na {
                    angles[[i, j]] = f.joint_angles[j] as f32;
                    angle_valid[[i, j]] = f.angle_valid[j];
                }
            }
            Err(Error::DegeneratePose(_)) => {}
            Err(e) => return Err(e),
        }
    }
    debug_assert_eq!(coords.shape(), [b, k, 2]);
    Ok(PoseTargets { coords, vis, ratios, angles, ratio_valid, angle_valid })
}

fn check_finite(value: f32, component: &str, step: u64) -> Result<f32> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence { component: component.to_string(), step })
    }
}

/// `L_adv + lambda_kp * L_kp + lambda_pose * L_pose` with finiteness
/// checks on every component.
pub fn composite_gan_objective(
    l_adv: f32,
    l_kp: f32,
    l_pose: f32,
    weights: &LossWeights,
) -> Result<f32> {
    check_finite(l_adv, "gan.l_adv", 0)?;
    check_finite(l_kp, "gan.l_kp", 0)?;
    check_finite(l_pose, "gan.l_pose", 0)?;
    Ok(l_adv + (weights.lambda_kp as f32) * l_kp + (weights.lambda_pose as f32) * l_pose)
}

/// `L_recon + lambda_kp * L_kp + lambda_pose * L_pose`.
pub fn composite_diffusion_objective(
    l_recon: f32,
    l_kp: f32,
    l_pose: f32,
    weights: &LossWeights,
) -> Result<f32> {
    check_finite(l_recon, "diffusion.l_recon", 0)?;
    check_finite(l_kp, "diffusion.l_kp", 0)?;
    check_finite(l_pose, "diffusion.l_pose", 0)?;
    Ok(l_recon + (weights.lambda_kp as f32) * l_kp + (weights.lambda_pose as f32) * l_pose)
}

/// Component losses from one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// Adversarial generator loss (GAN) or reconstruction loss
    /// (diffusion).
    pub l_main: f32,
    pub l_kp: f32,
    pub l_pose: f32,
    pub l_total: f32,
    /// Discriminator loss; zero for diffusion models.
    pub l_disc: f32,
}

/// One discriminator update followed by one generator update on the
/// composite objective. The latent batch is shared by both updates; pose
/// targets come from extracting the paired real images. An auxiliary
/// term with zero weight is skipped entirely, so its logged component
/// stays zero and disabled terms cost nothing.
#[allow(clippy::too_many_arguments)]
pub fn gan_train_step(
    pair: &GanPair,
    store: &mut ParamStore,
    adam_g: &mut Adam,
    adam_d: &mut Adam,
    real: &Array4<f32>,
    labels: &[usize],
    weights: &LossWeights,
    sup: Option<&PoseSupervision>,
    rng: &mut ChaCha20Rng,
    step: u64,
) -> Result<StepLosses> {
    let z = pair.sample_latents(rng, labels.len());

    // discriminator sees the generator output as data, not as a graph
    let fake_detached = {
        let mut g = Graph::inference();
        let mut bind = Binder::new(store);
        let fake = pair.generate(&mut g, &mut bind, &z, labels)?;
        g.value(fake).clone()
    };
    let l_disc = {
        let mut g = Graph::new();
        let mut bind = Binder::new(store);
        let rv = g.constant(real.clone().into_dyn());
        let fv = g.constant(fake_detached);
        let rl = pair.discriminate(&mut g, &mut bind, rv, labels)?;
        let fl = pair.discriminate(&mut g, &mut bind, fv, labels)?;
        let loss = logistic_d_loss(&mut g, rl, fl)?;
        let value = g.value(loss).first().copied().unwrap_or(f32::NAN);
        check_finite(value, "gan.l_disc", step)?;
        let mut grads = g.backward(loss)?;
        let mut named = bind.grads(&mut grads);
        named.retain(|n, _| n.starts_with("disc."));
        adam_d.step(store, &named)?;
        value
    };

    let mut g = Graph::new();
    let mut bind = Binder::new(store);
    let fake = pair.generate(&mut g, &mut bind, &z, labels)?;
    let logits = pair.discriminate(&mut g, &mut bind, fake, labels)?;
    let l_adv = logistic_g_loss(&mut g, logits)?;
    let mut terms = vec![(l_adv, 1.0f32)];
    let (mut l_kp_v, mut l_pose_v) = (0.0f32, 0.0f32);
    let use_kp = sup.is_some() && weights.lambda_kp > 0.0;
    let use_pose = sup.is_some() && weights.lambda_pose > 0.0;
    if use_kp || use_pose {
        let sup = sup.expect("gated above");
        let targets = extraction_targets(real, sup)?;
        let ge = soft_argmax_graph(&mut g, fake, &sup.palette, &sup.extract)?;
        if use_kp {
            let l_kp = keypoint_loss_graph(&mut g, ge.coords, &targets.coords, &targets.vis)?;
            l_kp_v =
                check_finite(g.value(l_kp).first().copied().unwrap_or(f32::NAN), "gan.l_kp", step)?;
            terms.push((l_kp, weights.lambda_kp as f32));
        }
        if use_pose {
            let feats = pose_features_graph(&mut g, ge.coords, &sup.topo)?;
            let l_pose = pose_consistency_graph(
                &mut g,
                &feats,
                &targets.ratios,
                &targets.angles,
                &targets.ratio_valid,
                &targets.angle_valid,
            )?;
            l_pose_v = check_finite(
                g.value(l_pose).first().copied().unwrap_or(f32::NAN),
                "gan.l_pose",
                step,
            )?;
            terms.push((l_pose, weights.lambda_pose as f32));
        }
    }
    let total = g.weighted_sum(&terms)?;
    let l_adv_v =
        check_finite(g.value(l_adv).first().copied().unwrap_or(f32::NAN), "gan.l_adv", step)?;
    let l_total_v =
        check_finite(g.value(total).first().copied().unwrap_or(f32::NAN), "gan.l_total", step)?;
    let mut grads = g.backward(total)?;
    let mut named = bind.grads(&mut grads);
    named.retain(|n, _| n.starts_with("gen."));
    adam_g.step(store, &named)?;

    Ok(StepLosses { l_main: l_adv_v, l_kp: l_kp_v, l_pose: l_pose_v, l_total: l_total_v, l_disc })
}

/// One optimizer step on the diffusion composite objective: noise the
/// real batch at per-sample timesteps, predict the noise, and attach pose
/// losses to the algebraic clean-image estimate. As in the GAN step,
/// zero-weight auxiliary terms are skipped and logged as zero.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_train_step(
    unet: &Unet,
    sched: &DiffusionSchedule,
    store: &mut ParamStore,
    adam: &mut Adam,
    real: &Array4<f32>,
    labels: &[usize],
    weights: &LossWeights,
    sup: Option<&PoseSupervision>,
    label_dropout: f32,
    rng: &mut ChaCha20Rng,
    step: u64,
) -> Result<StepLosses> {
    let b = labels.len();
    let t_count = sched.t_count();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..t_count)).collect();
    let mut eps = Array4::<f32>::zeros(real.raw_dim());
    eps.mapv_inplace(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng));
    let ys: Vec<usize> = labels
        .iter()
        .map(|&y| if rng.random::<f32>() < label_dropout { unet.cfg.null_class() } else { y })
        .collect();
    let xt = forward_diffuse(sched, real, &eps, &ts)?;

    let mut g = Graph::new();
    let mut bind = Binder::new(store);
    let xv = g.constant(xt.into_dyn());
    let ev = g.constant(eps.into_dyn());
    let eps_hat = unet.forward(&mut g, &mut bind, xv, &ts, &ys)?;
    let l_recon = diffusion_recon_loss(&mut g, eps_hat, ev)?;
    let mut terms = vec![(l_recon, 1.0f32)];
    let (mut l_kp_v, mut l_pose_v) = (0.0f32, 0.0f32);
    let use_kp = sup.is_some() && weights.lambda_kp > 0.0;
    let use_pose = sup.is_some() && weights.lambda_pose > 0.0;
    if use_kp || use_pose {
        let sup = sup.expect("gated above");
        let targets = extraction_targets(real, sup)?;
        let x0_hat = predict_x0_graph(&mut g, sched, xv, eps_hat, &ts)?;
        let ge = soft_argmax_graph(&mut g, x0_hat, &sup.palette, &sup.extract)?;
        if use_kp {
            let l_kp = keypoint_loss_graph(&mut g, ge.coords, &targets.coords, &targets.vis)?;
            l_kp_v = check_finite(
                g.value(l_kp).first().copied().unwrap_or(f32::NAN),
                "diffusion.l_kp",
                step,
            )?;
            terms.push((l_kp, weights.lambda_kp as f32));
        }
        if use_pose {
            let feats = pose_features_graph(&mut g, ge.coords, &sup.topo)?;
            let l_pose = pose_consistency_graph(
                &mut g,
                &feats,
                &targets.ratios,
                &targets.angles,
                &targets.ratio_valid,
                &targets.angle_valid,
            )?;
            l_pose_v = check_finite(
                g.value(l_pose).first().copied().unwrap_or(f32::NAN),
                "diffusion.l_pose",
                step,
            )?;
            terms.push((l_pose, weights.lambda_pose as f32));
        }
    }
    let total = g.weighted_sum(&terms)?;
    let l_recon_v = check_finite(
        g.value(l_recon).first().copied().unwrap_or(f32::NAN),
        "diffusion.l_recon",
        step,
    )?;
    let l_total_v = check_finite(
        g.value(total).first().copied().unwrap_or(f32::NAN),
        "diffusion.l_total",
        step,
    )?;
    let mut grads = g.backward(total)?;
    let named = bind.grads(&mut grads);
    adam.step(store, &named)?;

    Ok(StepLosses {
        l_main: l_recon_v,
        l_kp: l_kp_v,
        l_pose: l_pose_v,
        l_total: l_total_v,
        l_disc: 0.0,
    })
}

/// One per-step log row; the CSV columns in order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub l_adv_or_recon: f32,
    pub l_kp: f32,
    pub l_pose: f32,
    pub l_total: f32,
    pub wall_ms: f64,
}

/// Per-checkpoint quality snapshot on freshly sampled images.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalRecord {
    pub epoch: u64,
    pub mean_kp_error_px: f64,
    pub wall_ms: f64,
}

/// Full log of a run: step records plus per-checkpoint snapshots.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunLog {
    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.steps {
            w.serialize(r).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_evals_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for r in &self.evals {
            w.serialize(r).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRecord>> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut out = Vec::new();
        for rec in r.deserialize() {
            out.push(rec.map_err(|e| Error::Load(format!("{}: {e}", path.display())))?);
        }
        Ok(out)
    }

    pub fn read_evals_csv(path: &Path) -> Result<Vec<EvalRecord>> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let mut out = Vec::new();
        for rec in r.deserialize() {
            out.push(rec.map_err(|e| Error::Load(format!("{}: {e}", path.display())))?);
        }
        Ok(out)
    }
}

/// Model state for one run.
enum ModelState {
    Gan(GanPair),
    Diff { unet: Box<Unet>, sched: DiffusionSchedule },
}

/// Result of [`train`]: the final checkpoint location and the in-memory
/// log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: RunLog,
}

fn epoch_ckpt_path(run_dir: &Path, epoch: u64) -> PathBuf {
    run_dir.join(format!("ckpt_epoch{epoch:04}.ckpt"))
}

fn find_latest_epoch_ckpt(run_dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = match fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(_) => return Ok(None),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(num) = name.strip_prefix("ckpt_epoch").and_then(|n| n.strip_suffix(".ckpt")) {
            if let Ok(epoch) = num.parse::<u64>() {
                if best.as_ref().map(|(b, _)| epoch > *b).unwrap_or(true) {
                    best = Some((epoch, entry.path()));
                }
            }
        }
    }
    Ok(best)
}

fn gather_batch(dataset: &Dataset, indices: &[usize]) -> Result<(Array4<f32>, Vec<usize>)> {
    let first = dataset.image(indices[0])?;
    let (c, h, w) = (first.shape()[0], first.shape()[1], first.shape()[2]);
    let mut batch = Array4::<f32>::zeros((indices.len(), c, h, w));
    let mut labels = Vec::with_capacity(indices.len());
    for (i, &idx) in indices.iter().enumerate() {
        let img = if i == 0 { first.clone() } else { dataset.image(idx)? };
        batch.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(dataset.entries[idx].class_id);
    }
    Ok((batch, labels))
}

/// Samples a few images and scores their extracted poses against the
/// canonical posture of their class, in pixels.
fn quality_snapshot(
    model: &ModelState,
    store: &ParamStore,
    cfg: &TrainConfig,
    dataset: &Dataset,
    sup: &PoseSupervision,
    epoch: u64,
) -> Result<f64> {
    let classes = dataset.meta.num_classes;
    let labels: Vec<usize> = (0..cfg.eval_samples).map(|i| i % classes).collect();
    let mut rng = rng_from(cfg.seed, &[tag::TRAIN, 2, epoch]);
    let images: Array4<f32> = match model {
        ModelState::Gan(pair) => {
            let z = pair.sample_latents(&mut rng, labels.len());
            let mut g = Graph::inference();
            let mut bind = Binder::new(store);
            let out = pair.generate(&mut g, &mut bind, &z, &labels)?;
            g.value(out)
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::Numeric(format!("sample batch shape: {e}")))?
        }
        ModelState::Diff { unet, sched } => {
            let opts = SampleOptions {
                guidance_scale: cfg.guidance_scale,
                num_steps: Some(cfg.eval_sample_steps.min(sched.t_count())),
            };
            ddpm_sample(unet, store, sched, &labels, &opts, &mut rng)?
        }
    };

    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let img = images.index_axis(Axis(0), i).to_owned();
        let extracted = soft_argmax_extract(&img, &sup.palette, &sup.extract)?.pose;
        let canonical = &dataset.bank[y].pose;
        if let Some(d) = mean_joint_distance_px(&extracted, canonical, dataset.meta.image_size) {
            total += d;
            counted += 1;
        }
    }
    if counted == 0 {
        // nothing visible anywhere; report the image diagonal as a ceiling
        return Ok((dataset.meta.image_size as f64) * std::f64::consts::SQRT_2);
    }
    Ok(total / counted as f64)
}

struct LoopState {
    store: ParamStore,
    model: ModelState,
    adam_g: Adam,
    adam_d: Option<Adam>,
    start_epoch: u64,
    log: RunLog,
}

fn init_models(cfg: &TrainConfig, image_size: u32, num_classes: usize) -> Result<LoopState> {
    let mut store = ParamStore::new();
    let mut rng = rng_from(cfg.seed, &[tag::INIT]);
    let adam = |lr: f32, cfg: &TrainConfig| Adam::new(lr, cfg.adam_beta1, cfg.adam_beta2, 1e-8);
    if cfg.model_kind.is_diffusion() {
        let ucfg = UnetConfig { base_channels: cfg.base_channels, image_size, num_classes };
        let unet = Unet::init(&mut store, &mut rng, ucfg)?;
        let sched = DiffusionSchedule::linear(cfg.t_count)?;
        Ok(LoopState {
            store,
            model: ModelState::Diff { unet: Box::new(unet), sched },
            adam_g: adam(cfg.learning_rate, cfg),
            adam_d: None,
            start_epoch: 0,
            log: RunLog::default(),
        })
    } else {
        let gcfg = CganConfig {
            z_dim: cfg.z_dim,
            label_dim: cfg.label_dim,
            hidden: cfg.hidden.clone(),
            image_size,
            num_classes,
            leaky_slope: 0.2,
        };
        let pair = GanPair::init(&mut store, &mut rng, gcfg)?;
        Ok(LoopState {
            store,
            model: ModelState::Gan(pair),
            adam_g: adam(cfg.learning_rate, cfg),
            adam_d: Some(adam(cfg.learning_rate, cfg)),
            start_epoch: 0,
            log: RunLog::default(),
        })
    }
}

fn resume_models(
    cfg: &TrainConfig,
    image_size: u32,
    num_classes: usize,
    run_dir: &Path,
    epoch: u64,
    path: &Path,
    steps_per_epoch: u64,
) -> Result<LoopState> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.model_kind != cfg.model_kind.as_str() {
        return Err(Error::Load(format!(
            "checkpoint {} holds a {} model, config wants {}",
            path.display(),
            ckpt.model_kind,
            cfg.model_kind
        )));
    }
    let mut adam_g = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8);
    let mut adam_d = None;
    let model = if cfg.model_kind.is_diffusion() {
        let ucfg = UnetConfig { base_channels: cfg.base_channels, image_size, num_classes };
        let unet = Unet::attach(&ckpt.params, ucfg)?;
        let sched = ckpt
            .schedule
            .clone()
            .ok_or_else(|| Error::Load("diffusion checkpoint lacks a schedule".into()))?;
        adam_g.import_state(ckpt.adam_t, ckpt.adam_moments.clone());
        ModelState::Diff { unet: Box::new(unet), sched }
    } else {
        let gcfg = CganConfig {
            z_dim: cfg.z_dim,
            label_dim: cfg.label_dim,
            hidden: cfg.hidden.clone(),
            image_size,
            num_classes,
            leaky_slope: 0.2,
        };
        let pair = GanPair::attach(&ckpt.params, gcfg)?;
        let gen_moments: Vec<_> = ckpt
            .adam_moments
            .iter()
            .filter(|(n, _, _)| n.starts_with("gen."))
            .cloned()
            .collect();
        let disc_moments: Vec<_> = ckpt
            .adam_moments
            .iter()
            .filter(|(n, _, _)| n.starts_with("disc."))
            .cloned()
            .collect();
        adam_g.import_state(ckpt.adam_t, gen_moments);
        let mut d = Adam::new(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8);
        d.import_state(ckpt.adam_t, disc_moments);
        adam_d = Some(d);
        ModelState::Gan(pair)
    };

    // keep only the log rows the checkpoint actually covers
    let boundary = epoch * steps_per_epoch;
    let mut log = RunLog::default();
    let steps_path = run_dir.join("run_log.csv");
    if steps_path.exists() {
        log.steps = RunLog::read_steps_csv(&steps_path)?
            .into_iter()
            .filter(|r| r.step < boundary)
            .collect();
    }
    let evals_path = run_dir.join("run_eval.csv");
    if evals_path.exists() {
        log.evals = RunLog::read_evals_csv(&evals_path)?
            .into_iter()
            .filter(|r| r.epoch <= epoch)
            .collect();
    }

    Ok(LoopState { store: ckpt.params, model, adam_g, adam_d, start_epoch: epoch, log })
}

fn save_checkpoint(
    cfg: &TrainConfig,
    state: &LoopState,
    epoch: u64,
    step: u64,
    path: &Path,
) -> Result<()> {
    let schedule = match &state.model {
        ModelState::Diff { sched, .. } => Some(sched.clone()),
        ModelState::Gan(_) => None,
    };
    let mut moments = state.adam_g.export_state().1;
    if let Some(d) = &state.adam_d {
        moments.extend(d.export_state().1);
    }
    let mut ckpt = Checkpoint {
        model_kind: cfg.model_kind.as_str().to_string(),
        step,
        epoch,
        config: serde_json::to_value(cfg)
            .map_err(|e| Error::Config(format!("config snapshot: {e}")))?,
        schedule,
        params: state.store.clone(),
        adam_t: state.adam_g.step_count(),
        adam_moments: moments,
        rng_seed: [0; 32],
        rng_word_pos: 0,
    };
    ckpt.capture_rng(&rng_from(cfg.seed, &[tag::SAMPLE]));
    ckpt.save(path)
}

/// Runs the configured number of epochs over the train split, writing
/// `run_log.csv`, `run_eval.csv`, periodic epoch checkpoints, and
/// `ckpt_final.ckpt` under `run_dir`. If an epoch checkpoint already
/// exists there, training resumes after it and replays the same loss
/// sequence an uninterrupted run would have produced.
pub fn train(cfg: &TrainConfig, run_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;

    let mut dataset = load_dataset(&cfg.dataset)?;
    let image_size = match cfg.image_size {
        Some(s) if s != dataset.meta.image_size => {
            return Err(Error::Config(format!(
                "config image_size {s} but dataset was rendered at {}",
                dataset.meta.image_size
            )));
        }
        _ => dataset.meta.image_size,
    };
    let num_classes = dataset.meta.num_classes;
    dataset.preload()?;

    let mut resolved = cfg.clone();
    resolved.image_size = Some(image_size);
    let snapshot = serde_json::to_string_pretty(&resolved)
        .map_err(|e| Error::Config(format!("config snapshot: {e}")))?;
    let config_path = run_dir.join("config.json");
    fs::write(&config_path, snapshot).map_err(|e| Error::io(&config_path, e))?;

    let train_idx = dataset.indices_for(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training samples".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(resolved.batch_size) as u64;

    let mut state = match find_latest_epoch_ckpt(run_dir)? {
        Some((epoch, path)) if epoch <= resolved.epochs => resume_models(
            &resolved,
            image_size,
            num_classes,
            run_dir,
            epoch,
            &path,
            steps_per_epoch,
        )?,
        _ => init_models(&resolved, image_size, num_classes)?,
    };

    let weights = resolved.effective_weights()?;
    let sup_storage;
    let sup: Option<&PoseSupervision> = if resolved.model_kind.is_pose() {
        sup_storage = PoseSupervision::standard();
        Some(&sup_storage)
    } else {
        None
    };

    let mut step = state.start_epoch * steps_per_epoch;
    for epoch in state.start_epoch..resolved.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng_from(resolved.seed, &[tag::TRAIN, 0, epoch]));
        for chunk in order.chunks(resolved.batch_size) {
            let t0 = Instant::now();
            let (real, labels) = gather_batch(&dataset, chunk)?;
            let mut step_rng = rng_from(resolved.seed, &[tag::TRAIN, 1, step]);
            let losses = match &mut state.model {
                ModelState::Gan(pair) => gan_train_step(
                    pair,
                    &mut state.store,
                    &mut state.adam_g,
                    state.adam_d.as_mut().expect("gan training keeps a discriminator optimizer"),
                    &real,
                    &labels,
                    &weights,
                    sup,
                    &mut step_rng,
                    step,
                )?,
                ModelState::Diff { unet, sched } => diffusion_train_step(
                    unet,
                    sched,
                    &mut state.store,
                    &mut state.adam_g,
                    &real,
                    &labels,
                    &weights,
                    sup,
                    resolved.label_dropout,
                    &mut step_rng,
                    step,
                )?,
            };
            state.log.steps.push(StepRecord {
                step,
                epoch,
                l_adv_or_recon: losses.l_main,
                l_kp: losses.l_kp,
                l_pose: losses.l_pose,
                l_total: losses.l_total,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }

        let done = epoch + 1;
        if done % resolved.checkpoint_every == 0 || done == resolved.epochs {
            let t0 = Instant::now();
            let sup_eval = PoseSupervision::standard();
            let err = quality_snapshot(
                &state.model,
                &state.store,
                &resolved,
                &dataset,
                &sup_eval,
                done,
            )?;
            state.log.evals.push(EvalRecord {
                epoch: done,
                mean_kp_error_px: err,
                wall_ms: t0.elapsed().as_secs_f64() * 1e3,
            });
            save_checkpoint(&resolved, &state, done, step, &epoch_ckpt_path(run_dir, done))?;
            state.log.write_steps_csv(&run_dir.join("run_log.csv"))?;
            state.log.write_evals_csv(&run_dir.join("run_eval.csv"))?;
        }
    }

    let final_path = run_dir.join("ckpt_final.ckpt");
    save_checkpoint(&resolved, &state, resolved.epochs, step, &final_path)?;
    state.log.write_steps_csv(&run_dir.join("run_log.csv"))?;
    state.log.write_evals_csv(&run_dir.join("run_eval.csv"))?;
    Ok(TrainOutcome { checkpoint: final_path, log: state.log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};
    use tempfile::tempdir;

    fn tiny_dataset(dir: &Path) -> Dataset {
        let cfg = SynthConfig { num_classes: 2, per_class: 5, image_size: 32, seed: 11 };
        generate_dataset(dir, &cfg).unwrap()
    }

    fn tiny_train_config(dataset: &Path, kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            dataset: dataset.to_path_buf(),
            epochs: 1,
            batch_size: 4,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda_kp: 1.0,
            lambda_pose: 1.0,
            seed: 3,
            image_size: None,
            t_count: 8,
            guidance_scale: 0.0,
            label_dropout: 0.1,
            checkpoint_every: 10,
            eval_samples: 2,
            eval_sample_steps: 4,
            base_channels: 4,
            z_dim: 8,
            label_dim: 4,
            hidden: vec![16, 32],
        }
    }

    #[test]
    fn composite_objectives_match_hand_sums() {
        let w = LossWeights::new(1.0, 1.0).unwrap();
        assert!((composite_gan_objective(0.7, 0.0, 0.0, &w).unwrap() - 0.7).abs() < 1e-7);
        assert!((composite_gan_objective(0.7, 0.0025, 0.05, &w).unwrap() - 0.7525).abs() < 1e-6);
        assert!((composite_diffusion_objective(1.0, 0.0, 0.0, &w).unwrap() - 1.0).abs() < 1e-7);
        assert!(
            (composite_diffusion_objective(1.0, 0.0025, 0.05, &w).unwrap() - 1.0525).abs() < 1e-6
        );
    }

    #[test]
    fn composite_objectives_are_linear_in_weights() {
        let (l, kp, pose) = (0.4f32, 0.02f32, 0.06f32);
        for lam in [0.0f64, 1.0, 2.0] {
            let w = LossWeights::new(lam, lam).unwrap();
            let got = composite_gan_objective(l, kp, pose, &w).unwrap();
            let want = l + (lam as f32) * (kp + pose);
            assert!((got - want).abs() < 1e-6, "lambda {lam}");
        }
    }

    #[test]
    fn composite_objective_flags_nan_components() {
        let w = LossWeights::new(1.0, 1.0).unwrap();
        let err = composite_gan_objective(0.5, f32::NAN, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("l_kp"), "{err}");
        let err = composite_diffusion_objective(f32::INFINITY, 0.0, 0.0, &w).unwrap_err();
        assert!(err.to_string().contains("l_recon"), "{err}");
    }

    #[test]
    fn config_defaults_follow_the_stated_hyperparameters() {
        let toml_text = r#"
model_kind = "cgan"
dataset = "some/where"
epochs = 5
"#;
        let cfg: TrainConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.batch_size, 10);
        assert!((cfg.learning_rate - 2e-4).abs() < 1e-12);
        assert!((cfg.adam_beta1 - 0.5).abs() < 1e-12);
        assert!((cfg.adam_beta2 - 0.999).abs() < 1e-12);
        assert!((cfg.lambda_kp - 1.0).abs() < 1e-12);
        assert!((cfg.lambda_pose - 1.0).abs() < 1e-12);
        assert_eq!(cfg.t_count, 1000);
        assert!((cfg.label_dropout - 0.1).abs() < 1e-12);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let toml_text = r#"
model_kind = "cdiff"
dataset = "d"
epochs = 1
learning_rte = 0.1
"#;
        assert!(toml::from_str::<TrainConfig>(toml_text).is_err());
    }

    #[test]
    fn invalid_config_values_are_rejected() {
        let base = tiny_train_config(Path::new("x"), ModelKind::Cgan);
        for patch in [
            |c: &mut TrainConfig| c.batch_size = 0,
            |c: &mut TrainConfig| c.learning_rate = -1.0,
            |c: &mut TrainConfig| c.adam_beta1 = 1.0,
            |c: &mut TrainConfig| c.lambda_kp = -0.5,
            |c: &mut TrainConfig| c.t_count = 1,
            |c: &mut TrainConfig| c.label_dropout = 1.0,
            |c: &mut TrainConfig| c.checkpoint_every = 0,
            |c: &mut TrainConfig| c.guidance_scale = -2.0,
        ] {
            let mut c = base.clone();
            patch(&mut c);
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn baseline_kinds_zero_the_pose_weights() {
        let mut cfg = tiny_train_config(Path::new("x"), ModelKind::Cdiff);
        cfg.lambda_kp = 2.0;
        cfg.lambda_pose = 3.0;
        let w = cfg.effective_weights().unwrap();
        assert_eq!(w.lambda_kp, 0.0);
        assert_eq!(w.lambda_pose, 0.0);
        cfg.model_kind = ModelKind::CdiffPose;
        let w = cfg.effective_weights().unwrap();
        assert_eq!(w.lambda_kp, 2.0);
        assert_eq!(w.lambda_pose, 3.0);
    }

    #[test]
    fn extraction_targets_cover_clean_renders() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let (batch, _) = gather_batch(&ds, &[0, 1]).unwrap();
        let sup = PoseSupervision::standard();
        let t = extraction_targets(&batch, &sup).unwrap();
        assert_eq!(t.coords.shape(), &[2, 15, 2]);
        assert!(t.vis.iter().filter(|&&v| v).count() > 20, "most joints should be visible");
        assert!(t.ratio_valid.iter().any(|&v| v));
        assert!(t.angle_valid.iter().any(|&v| v));
    }

    #[test]
    fn gan_step_updates_only_its_side() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let (real, labels) = gather_batch(&ds, &[0, 1, 5, 6]).unwrap();

        let mut store = ParamStore::new();
        let mut rng = rng_from(1, &[tag::INIT]);
        let gcfg = CganConfig {
            z_dim: 8,
            label_dim: 4,
            hidden: vec![16, 32],
            image_size: 32,
            num_classes: 2,
            leaky_slope: 0.2,
        };
        let pair = GanPair::init(&mut store, &mut rng, gcfg).unwrap();
        let before = store.clone();
        let mut adam_g = Adam::new(2e-4, 0.5, 0.999, 1e-8);
        let mut adam_d = Adam::new(2e-4, 0.5, 0.999, 1e-8);
        let w = LossWeights::new(1.0, 1.0).unwrap();
        let sup = PoseSupervision::standard();
        let mut step_rng = rng_from(1, &[tag::TRAIN, 1, 0]);
        let losses = gan_train_step(
            &pair,
            &mut store,
            &mut adam_g,
            &mut adam_d,
            &real,
            &labels,
            &w,
            Some(&sup),
            &mut step_rng,
            0,
        )
        .unwrap();
        assert!(losses.l_total.is_finite());
        assert!(losses.l_kp > 0.0, "pose supervision should be live");
        assert!(losses.l_pose > 0.0);
        let mut changed = 0;
        for (name, value) in store.iter() {
            if before.get(name).unwrap() != value {
                changed += 1;
                assert!(
                    name.starts_with("gen.") || name.starts_with("disc."),
                    "unexpected update to {name}"
                );
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn pose_weights_zero_matches_baseline_exactly() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let (real, labels) = gather_batch(&ds, &[0, 3, 5]).unwrap();
        let sup = PoseSupervision::standard();

        let run = |use_sup: bool| {
            let mut store = ParamStore::new();
            let mut rng = rng_from(2, &[tag::INIT]);
            let ucfg = UnetConfig { base_channels: 4, image_size: 32, num_classes: 2 };
            let unet = Unet::init(&mut store, &mut rng, ucfg).unwrap();
            let sched = DiffusionSchedule::linear(8).unwrap();
            let mut adam = Adam::new(2e-4, 0.5, 0.999, 1e-8);
            let w = LossWeights::new(0.0, 0.0).unwrap();
            let mut step_rng = rng_from(2, &[tag::TRAIN, 1, 0]);
            let losses = diffusion_train_step(
                &unet,
                &sched,
                &mut store,
                &mut adam,
                &real,
                &labels,
                &w,
                if use_sup { Some(&sup) } else { None },
                0.1,
                &mut step_rng,
                0,
            )
            .unwrap();
            (losses, store)
        };
        let (la, sa) = run(false);
        let (lb, sb) = run(true);
        assert_eq!(la, lb, "losses must match bit for bit");
        assert_eq!(la.l_kp, 0.0);
        for (name, value) in sa.iter() {
            assert_eq!(sb.get(name).unwrap(), value, "{name}");
        }
    }

    #[test]
    fn diffusion_step_is_deterministic() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path());
        let (real, labels) = gather_batch(&ds, &[1, 4]).unwrap();
        let sup = PoseSupervision::standard();
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = rng_from(7, &[tag::INIT]);
            let ucfg = UnetConfig { base_channels: 4, image_size: 32, num_classes: 2 };
            let unet = Unet::init(&mut store, &mut rng, ucfg).unwrap();
            let sched = DiffusionSchedule::linear(8).unwrap();
            let mut adam = Adam::new(2e-4, 0.5, 0.999, 1e-8);
            let w = LossWeights::new(1.0, 1.0).unwrap();
            let mut step_rng = rng_from(7, &[tag::TRAIN, 1, 0]);
            diffusion_train_step(
                &unet,
                &sched,
                &mut store,
                &mut adam,
                &real,
                &labels,
                &w,
                Some(&sup),
                0.1,
                &mut step_rng,
                0,
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_writes_artifacts_and_logs() {
        let data_dir = tempdir().unwrap();
        tiny_dataset(data_dir.path());
        let run_dir = tempdir().unwrap();
        let cfg = tiny_train_config(data_dir.path(), ModelKind::CdiffPose);
        let outcome = train(&cfg, run_dir.path()).unwrap();
        assert!(outcome.checkpoint.exists());
        assert!(run_dir.path().join("config.json").exists());
        assert!(run_dir.path().join("run_log.csv").exists());
        assert!(run_dir.path().join("run_eval.csv").exists());
        // 10 train images (5 per class, none reach the val slot), batch 4
        assert_eq!(outcome.log.steps.len(), 3);
        assert!(outcome.log.steps.iter().all(|r| r.l_total.is_finite()));
        assert_eq!(outcome.log.evals.len(), 1);
        let rows = RunLog::read_steps_csv(&run_dir.path().join("run_log.csv")).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].step, 0);
        assert_eq!(rows[2].step, 2);
    }

    #[test]
    fn zero_epochs_yields_initial_checkpoint_and_empty_log() {
        let data_dir = tempdir().unwrap();
        tiny_dataset(data_dir.path());
        let run_dir = tempdir().unwrap();
        let mut cfg = tiny_train_config(data_dir.path(), ModelKind::Cgan);
        cfg.epochs = 0;
        let outcome = train(&cfg, run_dir.path()).unwrap();
        assert!(outcome.checkpoint.exists());
        assert!(outcome.log.steps.is_empty());
        let ckpt = Checkpoint::load(&outcome.checkpoint).unwrap();
        assert_eq!(ckpt.epoch, 0);
        assert_eq!(ckpt.model_kind, "cgan");
    }

    #[test]
    fn resume_replays_the_uninterrupted_sequence() {
        let data_dir = tempdir().unwrap();
        tiny_dataset(data_dir.path());

        let full_dir = tempdir().unwrap();
        let mut cfg = tiny_train_config(data_dir.path(), ModelKind::Cdiff);
        cfg.epochs = 2;
        cfg.checkpoint_every = 1;
        let full = train(&cfg, full_dir.path()).unwrap();

        let half_dir = tempdir().unwrap();
        let mut half_cfg = cfg.clone();
        half_cfg.epochs = 1;
        train(&half_cfg, half_dir.path()).unwrap();
        // same directory, extended budget: picks up from the epoch-1 state
        let resumed = train(&cfg, half_dir.path()).unwrap();

        assert_eq!(full.log.steps.len(), resumed.log.steps.len());
        for (a, b) in full.log.steps.iter().zip(resumed.log.steps.iter()) {
            assert_eq!(a.step, b.step);
            assert!((a.l_total - b.l_total).abs() < 1e-6, "step {}: {} vs {}", a.step, a.l_total, b.l_total);
            assert!((a.l_adv_or_recon - b.l_adv_or_recon).abs() < 1e-6);
        }
    }

    #[test]
    fn four_kinds_produce_loadable_checkpoints() {
        let data_dir = tempdir().unwrap();
        tiny_dataset(data_dir.path());
        for kind in ModelKind::ALL {
            let run_dir = tempdir().unwrap();
            let cfg = tiny_train_config(data_dir.path(), kind);
            let outcome = train(&cfg, run_dir.path()).unwrap();
            let ckpt = Checkpoint::load(&outcome.checkpoint).unwrap();
            assert_eq!(ckpt.model_kind, kind.as_str());
            assert_eq!(ckpt.schedule.is_some(), kind.is_diffusion());
            assert!(!ckpt.params.is_empty());
        }
    }
}
