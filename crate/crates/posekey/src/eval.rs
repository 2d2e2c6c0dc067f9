//! Distribution and fidelity metrics for generated posture images:
//! Fréchet distance over learned features, multi-scale structural
//! similarity, and keypoint error against each class's canonical pose,
//! plus the whole-run evaluation that ties them to a checkpoint.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{concatenate, Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::extract::soft_argmax_extract;
use crate::models::cgan::{CganConfig, GanPair};
use crate::models::diffusion::{ddpm_sample, DiffusionSchedule, SampleOptions};
use crate::models::unet::{Unet, UnetConfig};
use crate::nn::{Adam, Binder, Conv2d, Linear, ParamStore};
use crate::seeding::{rng_from, tag};
use crate::skeleton::mean_joint_distance_px;
use crate::synth::{Dataset, PostureSpec};
use crate::train::{ModelKind, PoseSupervision, TrainConfig};

/// Sample mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    /// Unbiased covariance, `[F, F]`.
    pub cov: Array2<f64>,
}

/// Mean and unbiased (n-1) covariance of `[N, F]` features.
pub fn gaussian_stats(features: &Array2<f32>) -> Result<GaussianStats> {
    let (n, f) = features.dim();
    if n < 2 {
        return Err(Error::Argument(format!(
            "gaussian_stats needs at least 2 samples, got {n}"
        )));
    }
    let x = features.mapv(|v| v as f64);
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    debug_assert_eq!(cov.dim(), (f, f));
    Ok(GaussianStats { mean, cov })
}

/// Eigenvalues this far below zero fail the PSD check; anything between
/// here and zero is treated as rounding and clamped.
pub const PSD_TOLERANCE: f64 = 1e-6;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root via eigendecomposition. The symmetric route
/// keeps all arithmetic real; clamping tiny negative eigenvalues plays
/// the role of discarding imaginary residue.
fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&l| l < -PSD_TOLERANCE) {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalue {bad:.3e}"
        )));
    }
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() || a.cov.dim() != b.cov.dim() {
        return Err(Error::Argument(format!(
            "fid: dimension mismatch, {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let d2: f64 = a.mean.iter().zip(b.mean.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = symmetrize(&to_dmatrix(&a.cov));
    let sb = symmetrize(&to_dmatrix(&b.cov));
    let ra = psd_sqrt(&sa, "first covariance")?;
    // PSD check on the second input; its root is not otherwise needed
    psd_sqrt(&sb, "second covariance")?;
    // Tr((S1 S2)^{1/2}) = Tr((A S2 A)^{1/2}) with A = S1^{1/2}, and
    // A S2 A is symmetric PSD, so its eigenvalues give the trace directly
    let inner = symmetrize(&(&ra * &sb * &ra));
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = d2 + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    if value < -PSD_TOLERANCE {
        return Err(Error::Numeric(format!("fid came out negative: {value:.3e}")));
    }
    Ok(value.max(0.0))
}

/// Canonical per-scale weights; the last entry belongs to the coarsest
/// scale, which also contributes the luminance term.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// How many of the five scales fit an image: each scale halves the
/// resolution and the Gaussian window must still fit.
pub fn ms_ssim_scales(min_side: usize) -> Result<usize> {
    if min_side < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "image side {min_side} is smaller than the {SSIM_WINDOW}px analysis window"
        )));
    }
    let mut scales = 1;
    let mut side = min_side;
    while scales < MS_SSIM_WEIGHTS.len() && side / 2 >= SSIM_WINDOW {
        side /= 2;
        scales += 1;
    }
    Ok(scales)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter, valid region only: output is
/// `(H-10) x (W-10)`.
fn filter_valid(img: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * img[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// 2x2 box average with stride 2; trailing odd rows/columns are dropped.
fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        0.25 * (img[[2 * i, 2 * j]]
            + img[[2 * i + 1, 2 * j]]
            + img[[2 * i, 2 * j + 1]]
            + img[[2 * i + 1, 2 * j + 1]])
    })
}

/// Mean contrast-structure and luminance terms at one scale.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mu_a = filter_valid(a, k);
    let mu_b = filter_valid(b, k);
    let saa = filter_valid(&(a * a), k) - &mu_a * &mu_a;
    let sbb = filter_valid(&(b * b), k) - &mu_b * &mu_b;
    let sab = filter_valid(&(a * b), k) - &mu_a * &mu_b;
    let mut cs_sum = 0.0;
    let mut l_sum = 0.0;
    let n = mu_a.len() as f64;
    for (((&ma, &mb), (&va, &vb)), &vab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(saa.iter().zip(sbb.iter()))
        .zip(sab.iter())
    {
        cs_sum += (2.0 * vab + c2) / (va + vb + c2);
        l_sum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
    }
    (cs_sum / n, l_sum / n)
}

/// MS-SSIM value plus how many scales the image size allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsSsimValue {
    pub value: f64,
    pub scales: usize,
}

/// Multi-scale SSIM between two `[C, H, W]` images in `[-1, 1]`,
/// averaged over channels. Images are mapped to `[0, 1]` first. When the
/// image is too small for all five scales, the pyramid is truncated and
/// the remaining weights renormalized; the scale count is reported back.
pub fn ms_ssim_detailed(a: &Array3<f32>, b: &Array3<f32>) -> Result<MsSsimValue> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "ms_ssim: image shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (channels, h, w) = a.dim();
    if channels == 0 || h == 0 || w == 0 {
        return Err(Error::Argument("ms_ssim: empty image".into()));
    }
    let scales = ms_ssim_scales(h.min(w))?;
    let weight_sum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let k = gaussian_kernel();

    let mut total = 0.0;
    for c in 0..channels {
        let to_unit = |v: &f32| (*v as f64 * 0.5 + 0.5).clamp(0.0, 1.0);
        let mut ca: Array2<f64> = a.index_axis(Axis(0), c).map(to_unit);
        let mut cb: Array2<f64> = b.index_axis(Axis(0), c).map(to_unit);
        let mut value = 1.0;
        for (s, &weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
            let (cs, l) = ssim_terms(&ca, &cb, &k);
            let wgt = weight / weight_sum;
            // negative correlation would make the fractional power
            // undefined; clamping keeps the score in [0, 1]
            value *= cs.max(0.0).powf(wgt);
            if s == scales - 1 {
                value *= l.max(0.0).powf(wgt);
            } else {
                ca = downsample2(&ca);
                cb = downsample2(&cb);
            }
        }
        total += value;
    }
    Ok(MsSsimValue { value: total / channels as f64, scales })
}

/// Multi-scale SSIM in `[0, 1]`; 1 means identical.
pub fn ms_ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    Ok(ms_ssim_detailed(a, b)?.value)
}

/// Deterministic map from images to fixed-width feature vectors.
pub trait FeatureExtractor {
    fn feature_dim(&self) -> usize;
    /// Human-readable provenance, recorded in report metadata.
    fn source(&self) -> String;
    /// `[N, 3, H, W]` images to `[N, F]` features.
    fn features(&self, images: &Array4<f32>) -> Result<Array2<f32>>;
}

/// Penultimate width of [`SmallCnn`].
pub const FEATURE_DIM: usize = 256;
const CNN_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const CNN_BATCH: usize = 64;

/// Small convolutional classifier trained on the synthetic train split;
/// its penultimate activations are the default FID features.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    store: ParamStore,
    convs: Vec<Conv2d>,
    fc0: Linear,
    fc1: Linear,
    pub num_classes: usize,
    source: String,
}

fn build_cnn(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    num_classes: usize,
) -> Result<(Vec<Conv2d>, Linear, Linear)> {
    if num_classes < 2 {
        return Err(Error::Argument(format!(
            "feature classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut convs = Vec::with_capacity(CNN_CHANNELS.len());
    let mut in_ch = 3;
    for (i, &out_ch) in CNN_CHANNELS.iter().enumerate() {
        convs.push(Conv2d::init(store, rng, &format!("feat.conv{i}"), in_ch, out_ch, 3, 2, 1)?);
        in_ch = out_ch;
    }
    let fc0 = Linear::init(store, rng, "feat.fc0", in_ch, FEATURE_DIM)?;
    let fc1 = Linear::init(store, rng, "feat.fc1", FEATURE_DIM, num_classes)?;
    Ok((convs, fc0, fc1))
}

impl SmallCnn {
    pub fn init(rng: &mut ChaCha20Rng, num_classes: usize) -> Result<Self> {
        let mut store = ParamStore::new();
        let (convs, fc0, fc1) = build_cnn(&mut store, rng, num_classes)?;
        Ok(Self { store, convs, fc0, fc1, num_classes, source: "untrained".into() })
    }

    /// Rebuilds the handles over a loaded parameter store.
    pub fn from_store(store: ParamStore, num_classes: usize, source: String) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let (convs, fc0, fc1) = build_cnn(&mut scratch, &mut rng, num_classes)?;
        for (name, template) in scratch.iter() {
            let actual = store
                .get(name)
                .map_err(|_| Error::Load(format!("feature extractor is missing {name:?}")))?;
            if actual.shape() != template.shape() {
                return Err(Error::Load(format!(
                    "feature extractor parameter {name:?} has shape {:?}, expected {:?}",
                    actual.shape(),
                    template.shape()
                )));
            }
        }
        Ok(Self { store, convs, fc0, fc1, num_classes, source })
    }

    /// Features before the classification head: `[B, 256]`.
    fn trunk(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, bind, h)?;
            h = g.relu(h);
        }
        let pooled = g.mean_hw(h)?;
        let f = self.fc0.forward(g, bind, pooled)?;
        Ok(g.relu(f))
    }

    fn logits(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let f = self.trunk(g, bind, x)?;
        self.fc1.forward(g, bind, f)
    }

    /// Trains the classifier on the dataset's train split with
    /// cross-entropy; preload the dataset first to avoid per-step PNG
    /// decodes.
    pub fn train_on(dataset: &Dataset, epochs: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from(seed, &[tag::EVAL, 0]);
        let mut model = Self::init(&mut rng, dataset.meta.num_classes)?;
        let mut adam = Adam::new(1e-3, 0.9, 0.999, 1e-8);
        let train_idx = dataset.indices_for(crate::synth::Split::Train);
        if train_idx.is_empty() {
            return Err(Error::Argument("dataset has no training samples".into()));
        }
        for epoch in 0..epochs {
            let mut order = train_idx.clone();
            order.shuffle(&mut rng_from(seed, &[tag::EVAL, 1, epoch as u64]));
            for chunk in order.chunks(32) {
                let (batch, labels) = stack_images(dataset, chunk)?;
                let mut g = Graph::new();
                let mut bind = Binder::new(&model.store);
                let xv = g.constant(batch.into_dyn());
                let logits = model.logits(&mut g, &mut bind, xv)?;
                let loss = g.cross_entropy_mean(logits, &labels)?;
                let mut grads = g.backward(loss)?;
                let named = bind.grads(&mut grads);
                adam.step(&mut model.store, &named)?;
            }
        }
        model.source = format!(
            "small-cnn trained {epochs} epochs on {} train images, seed {seed}",
            train_idx.len()
        );
        Ok(model)
    }

    /// Fraction of the given split classified correctly.
    pub fn accuracy(&self, dataset: &Dataset, split: crate::synth::Split) -> Result<f64> {
        let idx = dataset.indices_for(split);
        if idx.is_empty() {
            return Err(Error::Argument("empty split".into()));
        }
        let mut correct = 0usize;
        for chunk in idx.chunks(CNN_BATCH) {
            let (batch, labels) = stack_images(dataset, chunk)?;
            let mut g = Graph::inference();
            let mut bind = Binder::new(&self.store);
            let xv = g.constant(batch.into_dyn());
            let logits = self.logits(&mut g, &mut bind, xv)?;
            let lv = g.value(logits);
            for (row, &y) in lv.rows().into_iter().zip(&labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if pred == y {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / idx.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            model_kind: "feature_extractor".into(),
            step: 0,
            epoch: 0,
            config: serde_json::json!({
                "num_classes": self.num_classes,
                "source": self.source,
            }),
            schedule: None,
            params: self.store.clone(),
            adam_t: 0,
            adam_moments: Vec::new(),
            rng_seed: [0; 32],
            rng_word_pos: 0,
        };
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model_kind != "feature_extractor" {
            return Err(Error::Load(format!(
                "{} holds a {} model, not a feature extractor",
                path.display(),
                ckpt.model_kind
            )));
        }
        let num_classes = ckpt
            .config
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Load("feature extractor config lacks num_classes".into()))?;
        let source = ckpt
            .config
            .get("source")
            .and_then(|v| v.as_str())
            .unwrap_or("unknown")
            .to_string();
        Self::from_store(ckpt.params, num_classes as usize, source)
    }

    /// Loads a cached extractor, or trains one and caches it.
    pub fn load_or_train(path: &Path, dataset: &Dataset, epochs: usize, seed: u64) -> Result<Self> {
        if path.exists() {
            return Self::load(path);
        }
        let model = Self::train_on(dataset, epochs, seed)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        model.save(path)?;
        Ok(model)
    }
}

impl FeatureExtractor for SmallCnn {
    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn source(&self) -> String {
        self.source.clone()
    }

    fn features(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        let n = images.shape()[0];
        let mut out = Array2::<f32>::zeros((n, FEATURE_DIM));
        let mut row = 0usize;
        for chunk_start in (0..n).step_by(CNN_BATCH) {
            let end = (chunk_start + CNN_BATCH).min(n);
            let batch = images.slice(ndarray::s![chunk_start..end, .., .., ..]).to_owned();
            let mut g = Graph::inference();
            let mut bind = Binder::new(&self.store);
            let xv = g.constant(batch.into_dyn());
            let f = self.trunk(&mut g, &mut bind, xv)?;
            let fv = g.value(f);
            for r in fv.rows() {
                for (j, &v) in r.iter().enumerate() {
                    out[[row, j]] = v;
                }
                row += 1;
            }
        }
        Ok(out)
    }
}

fn stack_images(dataset: &Dataset, indices: &[usize]) -> Result<(Array4<f32>, Vec<usize>)> {
    let first = dataset.image(indices[0])?;
    let (c, h, w) = first.dim();
    let mut batch = Array4::<f32>::zeros((indices.len(), c, h, w));
    let mut labels = Vec::with_capacity(indices.len());
    for (i, &idx) in indices.iter().enumerate() {
        let img = if i == 0 { first.clone() } else { dataset.image(idx)? };
        batch.index_axis_mut(Axis(0), i).assign(&img);
        labels.push(dataset.entries[idx].class_id);
    }
    Ok((batch, labels))
}

/// Keypoint-error summary over a sample set, in pixels per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpErrorStats {
    /// Mean over all scored samples; `None` if nothing was scorable.
    pub mean_px: Option<f64>,
    /// Per-class means; `None` for classes with no scored samples.
    pub per_class: Vec<Option<f64>>,
    /// Samples whose extraction produced nothing comparable.
    pub missing: usize,
    pub counted: usize,
}

/// Extracts a pose from every image and scores it against the canonical
/// pose of its labeled class, scaled back to pixels. Extraction failures
/// count as missing rather than aborting.
pub fn mean_keypoint_error(
    images: &Array4<f32>,
    labels: &[usize],
    sup: &PoseSupervision,
    bank: &[PostureSpec],
    image_size: u32,
) -> Result<KpErrorStats> {
    let n = images.shape()[0];
    if labels.len() != n {
        return Err(Error::Argument(format!("{n} images with {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= bank.len()) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for a {}-class bank",
            bank.len()
        )));
    }
    let mut sums = vec![0.0f64; bank.len()];
    let mut counts = vec![0usize; bank.len()];
    let mut missing = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let img = images.index_axis(Axis(0), i).to_owned();
        let scored = soft_argmax_extract(&img, &sup.palette, &sup.extract)
            .ok()
            .and_then(|e| mean_joint_distance_px(&e.pose, &bank[y].pose, image_size));
        match scored {
            Some(d) => {
                sums[y] += d;
                counts[y] += 1;
            }
            None => missing += 1,
        }
    }
    let counted: usize = counts.iter().sum();
    let per_class = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    let mean_px = if counted > 0 {
        Some(sums.iter().sum::<f64>() / counted as f64)
    } else {
        None
    };
    Ok(KpErrorStats { mean_px, per_class, missing, counted })
}

enum GenModel {
    Gan(GanPair),
    Diff { unet: Box<Unet>, sched: DiffusionSchedule },
}

/// A generator rebuilt from a checkpoint, ready to sample images.
pub struct Sampler {
    kind: ModelKind,
    cfg: TrainConfig,
    store: ParamStore,
    model: GenModel,
    num_classes: usize,
    image_size: u32,
}

impl Sampler {
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let kind: ModelKind = ckpt.model_kind.parse()?;
        let cfg: TrainConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Load(format!("checkpoint config: {e}")))?;
        if cfg.model_kind != kind {
            return Err(Error::Load(format!(
                "checkpoint kind {} disagrees with its config {}",
                kind, cfg.model_kind
            )));
        }
        let image_size = cfg
            .image_size
            .ok_or_else(|| Error::Load("checkpoint config lacks a resolved image_size".into()))?;
        let store = ckpt.params;
        let (model, num_classes) = if kind.is_diffusion() {
            let vocab = store.get("unet.cls.table")?.shape()[0];
            let num_classes = vocab - 1;
            let ucfg = UnetConfig {
                base_channels: cfg.base_channels,
                image_size,
                num_classes,
            };
            let unet = Unet::attach(&store, ucfg)?;
            let sched = ckpt
                .schedule
                .ok_or_else(|| Error::Load("diffusion checkpoint lacks a schedule".into()))?;
            (GenModel::Diff { unet: Box::new(unet), sched }, num_classes)
        } else {
            let num_classes = store.get("gen.emb.table")?.shape()[0];
            let gcfg = CganConfig {
                z_dim: cfg.z_dim,
                label_dim: cfg.label_dim,
                hidden: cfg.hidden.clone(),
                image_size,
                num_classes,
                leaky_slope: 0.2,
            };
            (GenModel::Gan(GanPair::attach(&store, gcfg)?), num_classes)
        };
        Ok(Self { kind, cfg, store, model, num_classes, image_size })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_size(&self) -> u32 {
        self.image_size
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Samples one image per label. `steps` respaces the diffusion
    /// schedule and `guidance` overrides the configured scale; both are
    /// ignored by GAN checkpoints.
    pub fn sample(
        &self,
        labels: &[usize],
        steps: Option<usize>,
        guidance: Option<f32>,
        rng: &mut ChaCha20Rng,
    ) -> Result<Array4<f32>> {
        match &self.model {
            GenModel::Gan(pair) => {
                let z = pair.sample_latents(rng, labels.len());
                let mut g = Graph::inference();
                let mut bind = Binder::new(&self.store);
                let out = pair.generate(&mut g, &mut bind, &z, labels)?;
                g.value(out)
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::Numeric(format!("sample batch shape: {e}")))
            }
            GenModel::Diff { unet, sched } => {
                let opts = SampleOptions {
                    guidance_scale: guidance.unwrap_or(self.cfg.guidance_scale),
                    num_steps: steps.map(|s| s.min(sched.t_count())),
                };
                ddpm_sample(unet, &self.store, sched, labels, &opts, rng)
            }
        }
    }
}

/// Settings for [`evaluate_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Images sampled per class; below 100 the report carries a
    /// small-sample caveat.
    pub n_per_class: usize,
    /// Respaced diffusion steps; `None` runs the full schedule.
    pub sample_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { n_per_class: 100, sample_steps: None, batch_size: 25, seed: 0 }
    }
}

/// Metrics restricted to one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub class_id: usize,
    pub fid: f64,
    pub ms_ssim: f64,
    pub mean_kp_err_px: Option<f64>,
    pub n_gen: usize,
    pub n_real: usize,
}

/// Provenance captured alongside the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub feature_source: String,
    pub seed: u64,
    pub n_per_class: usize,
    pub sample_steps: Option<usize>,
    /// True when fewer than 100 samples per class were used.
    pub small_sample: bool,
    pub ms_ssim_scales: usize,
    /// Effective keypoint-loss weight the run trained with; zero for
    /// baselines.
    pub lambda_kp: f64,
    /// Effective pose-consistency weight; zero for baselines.
    pub lambda_pose: f64,
    /// How keypoints were read off the generated images.
    pub kp_source: String,
}

/// One evaluated checkpoint: global and per-class metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub fid: f64,
    pub ms_ssim: f64,
    pub mean_kp_err_px: Option<f64>,
    pub kp_missing: usize,
    pub per_class: Vec<PerClassMetrics>,
    pub meta: ReportMeta,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Index of the real image closest to `img` in plain pixel distance.
fn nearest_exemplar(img: &Array3<f32>, pool: &[Array3<f32>]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, cand) in pool.iter().enumerate() {
        let mut d = 0.0f64;
        for (a, b) in img.iter().zip(cand.iter()) {
            let diff = (a - b) as f64;
            d += diff * diff;
            if d >= best_d {
                break;
            }
        }
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Samples `n_per_class` images per class from the checkpoint, then
/// scores them against the dataset: Fréchet distance on extractor
/// features (globally and per class), MS-SSIM against each sample's
/// nearest real exemplar of the same class, and mean keypoint error
/// against the canonical class poses. Deterministic in the seed.
pub fn evaluate_run(
    checkpoint: &Path,
    dataset: &mut Dataset,
    extractor: &dyn FeatureExtractor,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if opts.n_per_class == 0 || opts.batch_size == 0 {
        return Err(Error::Argument("n_per_class and batch_size must be positive".into()));
    }
    let sampler = Sampler::from_checkpoint(checkpoint)?;
    if sampler.image_size() != dataset.meta.image_size {
        return Err(Error::Load(format!(
            "checkpoint renders {}px images but the dataset holds {}px",
            sampler.image_size(),
            dataset.meta.image_size
        )));
    }
    if sampler.num_classes() != dataset.meta.num_classes {
        return Err(Error::Load(format!(
            "checkpoint has {} classes but the dataset {}",
            sampler.num_classes(),
            dataset.meta.num_classes
        )));
    }
    dataset.preload()?;
    let classes = dataset.meta.num_classes;

    // generated images, grouped then concatenated per class
    let mut gen_per_class: Vec<Array4<f32>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut rng = rng_from(opts.seed, &[tag::EVAL, 2, c as u64]);
        let mut chunks = Vec::new();
        let mut remaining = opts.n_per_class;
        while remaining > 0 {
            let b = remaining.min(opts.batch_size);
            chunks.push(sampler.sample(&vec![c; b], opts.sample_steps, None, &mut rng)?);
            remaining -= b;
        }
        let views: Vec<_> = chunks.iter().map(|a| a.view()).collect();
        gen_per_class.push(
            concatenate(Axis(0), &views).map_err(|e| Error::Numeric(format!("stacking: {e}")))?,
        );
    }

    // real images grouped per class, both splits
    let mut real_per_class: Vec<Vec<Array3<f32>>> = vec![Vec::new(); classes];
    for idx in 0..dataset.len() {
        let c = dataset.entries[idx].class_id;
        real_per_class[c].push(dataset.image(idx)?);
    }
    if let Some(c) = real_per_class.iter().position(|v| v.len() < 2) {
        return Err(Error::Argument(format!(
            "class {c} has fewer than 2 real images; metrics need more"
        )));
    }

    let stack3 = |imgs: &[Array3<f32>]| -> Result<Array4<f32>> {
        let views: Vec<_> = imgs.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::Numeric(format!("stacking: {e}")))
    };

    // features and Fréchet distances
    let mut gen_feats = Vec::with_capacity(classes);
    let mut real_feats = Vec::with_capacity(classes);
    for c in 0..classes {
        gen_feats.push(extractor.features(&gen_per_class[c])?);
        real_feats.push(extractor.features(&stack3(&real_per_class[c])?)?);
    }
    let concat_rows = |parts: &[Array2<f32>]| -> Result<Array2<f32>> {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::Numeric(format!("stacking: {e}")))
    };
    let global_fid = fid(
        &gaussian_stats(&concat_rows(&real_feats)?)?,
        &gaussian_stats(&concat_rows(&gen_feats)?)?,
    )?;

    // MS-SSIM against nearest real exemplars, and per-class FID
    let mut per_class = Vec::with_capacity(classes);
    let mut msssim_total = 0.0;
    let mut msssim_count = 0usize;
    for c in 0..classes {
        let class_fid = fid(&gaussian_stats(&real_feats[c])?, &gaussian_stats(&gen_feats[c])?)?;
        let mut class_ssim_sum = 0.0;
        let n_gen = gen_per_class[c].shape()[0];
        for i in 0..n_gen {
            let img = gen_per_class[c].index_axis(Axis(0), i).to_owned();
            let nearest = nearest_exemplar(&img, &real_per_class[c]);
            class_ssim_sum += ms_ssim(&img, &real_per_class[c][nearest])?;
        }
        msssim_total += class_ssim_sum;
        msssim_count += n_gen;
        per_class.push(PerClassMetrics {
            class_id: c,
            fid: class_fid,
            ms_ssim: class_ssim_sum / n_gen as f64,
            mean_kp_err_px: None,
            n_gen,
            n_real: real_per_class[c].len(),
        });
    }

    // keypoint error on all generated samples
    let gen_views: Vec<_> = gen_per_class.iter().map(|a| a.view()).collect();
    let all_gen =
        concatenate(Axis(0), &gen_views).map_err(|e| Error::Numeric(format!("stacking: {e}")))?;
    let labels: Vec<usize> =
        (0..classes).flat_map(|c| std::iter::repeat_n(c, opts.n_per_class)).collect();
    let sup = PoseSupervision::standard();
    let kp = mean_keypoint_error(&all_gen, &labels, &sup, &dataset.bank, dataset.meta.image_size)?;
    for (row, err) in per_class.iter_mut().zip(&kp.per_class) {
        row.mean_kp_err_px = *err;
    }

    let manifest = dataset.root.join("manifest.csv");
    let manifest_bytes = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let config_json = serde_json::to_string(sampler.config())
        .map_err(|e| Error::Config(format!("config hash: {e}")))?;
    let weights = sampler.config().effective_weights()?;

    Ok(MetricReport {
        model: sampler.kind().as_str().to_string(),
        fid: global_fid,
        ms_ssim: msssim_total / msssim_count as f64,
        mean_kp_err_px: kp.mean_px,
        kp_missing: kp.missing,
        per_class,
        meta: ReportMeta {
            config_sha256: sha256_hex(config_json.as_bytes()),
            dataset_sha256: sha256_hex(&manifest_bytes),
            feature_source: extractor.source(),
            seed: opts.seed,
            n_per_class: opts.n_per_class,
            sample_steps: opts.sample_steps,
            small_sample: opts.n_per_class < 100,
            ms_ssim_scales: ms_ssim_scales(dataset.meta.image_size as usize)?,
            lambda_kp: weights.lambda_kp,
            lambda_pose: weights.lambda_pose,
            kp_source: "soft-argmax extractor".into(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonTopology;
    use crate::synth::{generate_dataset, joint_palette, render_posture, Split, SynthConfig};
    use crate::train::{train, TrainConfig};
    use ndarray::{arr1, arr2, Array};
    use rand::Rng;
    use tempfile::tempdir;

    fn randn(rng: &mut ChaCha20Rng) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    }

    fn random_image(rng: &mut ChaCha20Rng, size: usize) -> Array3<f32> {
        Array::from_shape_fn((3, size, size), |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn gaussian_stats_match_hand_examples() {
        let feats = arr2(&[[1.0f32, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let stats = gaussian_stats(&feats).unwrap();
        assert_eq!(stats.mean, arr1(&[0.0, 0.0, 0.0]));
        let expected = arr2(&[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(stats.cov, expected);

        let same = arr2(&[[3.0f32, 1.0], [3.0, 1.0], [3.0, 1.0]]);
        let stats = gaussian_stats(&same).unwrap();
        assert!(stats.cov.iter().all(|&v| v == 0.0));

        assert!(gaussian_stats(&arr2(&[[1.0f32, 2.0]])).is_err());
    }

    #[test]
    fn gaussian_stats_are_permutation_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let feats = Array2::from_shape_fn((12, 4), |_| randn(&mut rng) as f32);
        let mut order: Vec<usize> = (0..12).collect();
        order.shuffle(&mut rng);
        let mut shuffled = Array2::<f32>::zeros((12, 4));
        for (dst, &src) in order.iter().enumerate() {
            shuffled.row_mut(dst).assign(&feats.row(src));
        }
        let a = gaussian_stats(&feats).unwrap();
        let b = gaussian_stats(&shuffled).unwrap();
        for (x, y) in a.mean.iter().zip(b.mean.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.cov.iter().zip(b.cov.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn random_psd_pair(rng: &mut ChaCha20Rng, f: usize) -> (GaussianStats, GaussianStats) {
        // shared eigenbasis so the closed-form commuting formula applies
        let raw = DMatrix::<f64>::from_fn(f, f, |_, _| randn(rng));
        let q = raw.qr().q();
        let evals_a: Vec<f64> = (0..f).map(|_| rng.random_range(0.1..3.0)).collect();
        let evals_b: Vec<f64> = (0..f).map(|_| rng.random_range(0.1..3.0)).collect();
        let rotate = |evals: &[f64]| {
            let d = DMatrix::from_diagonal(&DVector::from_row_slice(evals));
            let m = &q * d * q.transpose();
            Array2::from_shape_fn((f, f), |(i, j)| m[(i, j)])
        };
        let mean_a = Array1::from_shape_fn(f, |_| randn(rng));
        let mean_b = Array1::from_shape_fn(f, |_| randn(rng));
        (
            GaussianStats { mean: mean_a, cov: rotate(&evals_a) },
            GaussianStats { mean: mean_b, cov: rotate(&evals_b) },
        )
    }

    fn commuting_fid(a: &GaussianStats, b: &GaussianStats, q: Option<()>) -> f64 {
        // only valid when covariances share an eigenbasis
        let _ = q;
        let d2: f64 = a.mean.iter().zip(b.mean.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        let sa = SymmetricEigen::new(to_dmatrix(&a.cov));
        let sb = SymmetricEigen::new(to_dmatrix(&b.cov));
        // pair eigenvalues through the shared basis: diagonalize b in a's basis
        let bb = sa.eigenvectors.transpose() * to_dmatrix(&b.cov) * &sa.eigenvectors;
        let mut total = d2;
        for i in 0..a.mean.len() {
            let la = sa.eigenvalues[i].max(0.0);
            let lb = bb[(i, i)].max(0.0);
            total += la + lb - 2.0 * (la * lb).sqrt();
        }
        let _ = sb;
        total
    }

    #[test]
    fn fid_identity_is_zero_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (a, b) = random_psd_pair(&mut rng, 5);
            assert!(fid(&a, &a).unwrap() < 1e-8);
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
            assert!(ab >= 0.0);
        }
    }

    #[test]
    fn fid_matches_hand_examples() {
        let f = 6;
        let eye = Array2::from_diag(&Array1::from_elem(f, 1.0));
        let mut mean_b = Array1::zeros(f);
        mean_b[0] = 1.0;
        let a = GaussianStats { mean: Array1::zeros(f), cov: eye.clone() };
        let b = GaussianStats { mean: mean_b, cov: eye.clone() };
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);

        let four = GaussianStats { mean: Array1::zeros(f), cov: &eye * 4.0 };
        let one = GaussianStats { mean: Array1::zeros(f), cov: eye };
        // F * (4 + 1 - 2*2) = F
        assert!((fid(&four, &one).unwrap() - f as f64).abs() < 1e-9);
    }

    #[test]
    fn fid_agrees_with_commuting_closed_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for trial in 0..50 {
            let f = 3 + (trial % 5);
            let (a, b) = random_psd_pair(&mut rng, f);
            let got = fid(&a, &b).unwrap();
            let want = commuting_fid(&a, &b, None);
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-6, "trial {trial}: {got} vs {want} (rel {rel:.2e})");
        }
    }

    #[test]
    fn fid_rejects_non_psd_covariance() {
        let mut cov = Array2::from_diag(&arr1(&[1.0, -1.0, 1.0]));
        let a = GaussianStats { mean: Array1::zeros(3), cov: cov.clone() };
        cov[[1, 1]] = 1.0;
        let b = GaussianStats { mean: Array1::zeros(3), cov };
        let err = fid(&a, &b).unwrap_err();
        assert!(err.to_string().contains("positive semi-definite"), "{err}");
    }

    #[test]
    fn ms_ssim_self_is_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 64);
        let v = ms_ssim(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");

        let flat = Array3::from_elem((3, 32, 32), 0.25f32);
        assert!((ms_ssim(&flat, &flat).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ms_ssim_is_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = random_image(&mut rng, 48);
            let b = random_image(&mut rng, 48);
            let ab = ms_ssim(&a, &b).unwrap();
            let ba = ms_ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ms_ssim_rejects_mismatched_shapes() {
        let a = Array3::<f32>::zeros((3, 32, 32));
        let b = Array3::<f32>::zeros((3, 32, 16));
        assert!(ms_ssim(&a, &b).is_err());
    }

    #[test]
    fn ms_ssim_scale_count_follows_image_size() {
        assert_eq!(ms_ssim_scales(176).unwrap(), 5);
        assert_eq!(ms_ssim_scales(128).unwrap(), 4);
        assert_eq!(ms_ssim_scales(64).unwrap(), 3);
        assert_eq!(ms_ssim_scales(32).unwrap(), 2);
        assert_eq!(ms_ssim_scales(16).unwrap(), 1);
        assert!(ms_ssim_scales(10).is_err());
    }

    /// Plain nested-loop reimplementation used as an oracle: 2D window
    /// built directly, direct convolution, no separability tricks.
    fn reference_ms_ssim(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
        let sigma = 1.5f64;
        let mut win = [[0.0f64; 11]; 11];
        let mut wsum = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                wsum += *v;
            }
        }
        for row in win.iter_mut() {
            for v in row.iter_mut() {
                *v /= wsum;
            }
        }
        let blur = |img: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let (h, w) = (img.len(), img[0].len());
            let mut out = vec![vec![0.0; w - 10]; h - 10];
            for i in 0..h - 10 {
                for j in 0..w - 10 {
                    let mut acc = 0.0;
                    for (u, row) in win.iter().enumerate() {
                        for (v, &kv) in row.iter().enumerate() {
                            acc += kv * img[i + u][j + v];
                        }
                    }
                    out[i][j] = acc;
                }
            }
            out
        };
        let half = |img: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            let (h, w) = (img.len() / 2, img[0].len() / 2);
            let mut out = vec![vec![0.0; w]; h];
            for (i, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = 0.25
                        * (img[2 * i][2 * j]
                            + img[2 * i + 1][2 * j]
                            + img[2 * i][2 * j + 1]
                            + img[2 * i + 1][2 * j + 1]);
                }
            }
            out
        };
        let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
        let mut scales = 1usize;
        let mut side = a.dim().1.min(a.dim().2);
        while scales < 5 && side / 2 >= 11 {
            side /= 2;
            scales += 1;
        }
        let wnorm: f64 = weights[..scales].iter().sum();
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        for ch in 0..a.dim().0 {
            let grab = |t: &Array3<f32>| -> Vec<Vec<f64>> {
                (0..t.dim().1)
                    .map(|i| {
                        (0..t.dim().2)
                            .map(|j| (t[[ch, i, j]] as f64 * 0.5 + 0.5).clamp(0.0, 1.0))
                            .collect()
                    })
                    .collect()
            };
            let mut xa = grab(a);
            let mut xb = grab(b);
            let mut val = 1.0;
            #[allow(clippy::needless_range_loop)]
            for s in 0..scales {
                let sq = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    m.iter().map(|r| r.iter().map(|v| v * v).collect()).collect()
                };
                let prod: Vec<Vec<f64>> = xa
                    .iter()
                    .zip(&xb)
                    .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x * y).collect())
                    .collect();
                let (ma, mb) = (blur(&xa), blur(&xb));
                let (maa, mbb, mab) = (blur(&sq(&xa)), blur(&sq(&xb)), blur(&prod));
                let mut cs_sum = 0.0;
                let mut l_sum = 0.0;
                let mut n = 0.0;
                for i in 0..ma.len() {
                    for j in 0..ma[0].len() {
                        let va = maa[i][j] - ma[i][j] * ma[i][j];
                        let vb = mbb[i][j] - mb[i][j] * mb[i][j];
                        let vab = mab[i][j] - ma[i][j] * mb[i][j];
                        cs_sum += (2.0 * vab + c2) / (va + vb + c2);
                        l_sum += (2.0 * ma[i][j] * mb[i][j] + c1)
                            / (ma[i][j] * ma[i][j] + mb[i][j] * mb[i][j] + c1);
                        n += 1.0;
                    }
                }
                let wgt = weights[s] / wnorm;
                val *= (cs_sum / n).max(0.0).powf(wgt);
                if s == scales - 1 {
                    val *= (l_sum / n).max(0.0).powf(wgt);
                } else {
                    xa = half(&xa);
                    xb = half(&xb);
                }
            }
            total += val;
        }
        total / a.dim().0 as f64
    }

    #[test]
    fn ms_ssim_agrees_with_reference_implementation() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for pair in 0..20 {
            let size = if pair < 18 { 64 } else { 176 };
            let a = random_image(&mut rng, size);
            // mix of related and unrelated pairs
            let b = if pair % 3 == 0 {
                a.mapv(|v| (v + 0.1).clamp(-1.0, 1.0))
            } else {
                random_image(&mut rng, size)
            };
            let got = ms_ssim(&a, &b).unwrap();
            let want = reference_ms_ssim(&a, &b);
            assert!((got - want).abs() < 1e-4, "pair {pair}: {got} vs {want}");
        }
    }

    fn tiny_dataset(dir: &Path, per_class: usize, size: u32) -> Dataset {
        let cfg = SynthConfig { num_classes: 2, per_class, image_size: size, seed: 21 };
        let mut ds = generate_dataset(dir, &cfg).unwrap();
        ds.preload().unwrap();
        ds
    }

    #[test]
    fn small_cnn_learns_the_tiny_dataset() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 20, 32);
        let model = SmallCnn::train_on(&ds, 20, 0).unwrap();
        let acc = model.accuracy(&ds, Split::Train).unwrap();
        assert!(acc >= 0.9, "train accuracy {acc}");
    }

    #[test]
    fn features_are_deterministic_with_fixed_width() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3, 32);
        let (batch, _) = stack_images(&ds, &[0, 1, 2]).unwrap();
        let model = SmallCnn::train_on(&ds, 1, 4).unwrap();
        let f1 = model.features(&batch).unwrap();
        let f2 = model.features(&batch).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.dim(), (3, FEATURE_DIM));
        assert_eq!(model.feature_dim(), FEATURE_DIM);
    }

    #[test]
    fn small_cnn_round_trips_through_disk() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3, 32);
        let model = SmallCnn::train_on(&ds, 1, 7).unwrap();
        let path = dir.path().join("feat.ckpt");
        model.save(&path).unwrap();
        let loaded = SmallCnn::load(&path).unwrap();
        let (batch, _) = stack_images(&ds, &[0, 4]).unwrap();
        assert_eq!(model.features(&batch).unwrap(), loaded.features(&batch).unwrap());
        assert_eq!(loaded.num_classes, 2);

        let cached = SmallCnn::load_or_train(&path, &ds, 1, 7).unwrap();
        assert_eq!(model.features(&batch).unwrap(), cached.features(&batch).unwrap());
    }

    #[test]
    fn keypoint_error_near_zero_on_clean_renders() {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig { num_classes: 3, per_class: 2, image_size: 64, seed: 2 };
        let ds = generate_dataset(dir.path(), &cfg).unwrap();
        let topo = SkeletonTopology::human15();
        let palette = joint_palette(topo.joint_count());
        let mut images = Array4::<f32>::zeros((3, 3, 64, 64));
        for c in 0..3 {
            let img = render_posture(&ds.bank[c].pose, &topo, &palette, 64).unwrap();
            images.index_axis_mut(Axis(0), c).assign(&img);
        }
        let sup = PoseSupervision::standard();
        let stats = mean_keypoint_error(&images, &[0, 1, 2], &sup, &ds.bank, 64).unwrap();
        assert_eq!(stats.missing, 0);
        assert_eq!(stats.counted, 3);
        let mean = stats.mean_px.unwrap();
        assert!(mean < 1.0, "mean error {mean} px");
        assert!(stats.per_class.iter().all(|e| e.unwrap() < 1.5));
    }

    #[test]
    fn keypoint_error_is_relabeling_invariant() {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig { num_classes: 3, per_class: 2, image_size: 64, seed: 2 };
        let ds = generate_dataset(dir.path(), &cfg).unwrap();
        let topo = SkeletonTopology::human15();
        let palette = joint_palette(topo.joint_count());
        let mut images = Array4::<f32>::zeros((3, 3, 64, 64));
        for c in 0..3 {
            let img = render_posture(&ds.bank[c].pose, &topo, &palette, 64).unwrap();
            images.index_axis_mut(Axis(0), c).assign(&img);
        }
        let sup = PoseSupervision::standard();
        let direct = mean_keypoint_error(&images, &[0, 1, 2], &sup, &ds.bank, 64).unwrap();
        // permute classes consistently: swap labels 0<->2 along with the bank
        let mut bank = ds.bank.clone();
        bank.swap(0, 2);
        let permuted = mean_keypoint_error(&images, &[2, 1, 0], &sup, &bank, 64).unwrap();
        assert!((direct.mean_px.unwrap() - permuted.mean_px.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn keypoint_error_canonical_self_distance_is_zero() {
        let dir = tempdir().unwrap();
        let cfg = SynthConfig { num_classes: 2, per_class: 2, image_size: 64, seed: 6 };
        let ds = generate_dataset(dir.path(), &cfg).unwrap();
        let d = mean_joint_distance_px(&ds.bank[0].pose, &ds.bank[0].pose, 64).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn self_evaluation_bound_holds() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 6, 32);
        let model = SmallCnn::train_on(&ds, 2, 1).unwrap();
        let idx = ds.indices_for(Split::Train);
        let (batch, _) = stack_images(&ds, &idx).unwrap();
        let feats = model.features(&batch).unwrap();
        let stats = gaussian_stats(&feats).unwrap();
        assert!(fid(&stats, &stats).unwrap() < 1.0);
        // identical pairing: every image against itself
        let one = batch.index_axis(Axis(0), 0).to_owned();
        assert!((ms_ssim(&one, &one).unwrap() - 1.0).abs() < 1e-6);
    }

    fn quick_checkpoint(data_dir: &Path, run_dir: &Path, kind: ModelKind) -> std::path::PathBuf {
        let cfg = TrainConfig {
            model_kind: kind,
            dataset: data_dir.to_path_buf(),
            epochs: 0,
            batch_size: 4,
            learning_rate: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            lambda_kp: 1.0,
            lambda_pose: 1.0,
            seed: 12,
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
        };
        train(&cfg, run_dir).unwrap().checkpoint
    }

    #[test]
    fn evaluate_run_is_deterministic_and_complete() {
        let data_dir = tempdir().unwrap();
        let mut ds = tiny_dataset(data_dir.path(), 5, 32);
        let run_dir = tempdir().unwrap();
        let ckpt = quick_checkpoint(data_dir.path(), run_dir.path(), ModelKind::Cgan);
        let extractor = SmallCnn::train_on(&ds, 1, 3).unwrap();
        let opts = EvalOptions { n_per_class: 3, sample_steps: None, batch_size: 2, seed: 5 };
        let report = evaluate_run(&ckpt, &mut ds, &extractor, &opts).unwrap();
        assert_eq!(report.model, "cgan");
        assert!(report.fid.is_finite() && report.fid >= 0.0);
        assert!((0.0..=1.0).contains(&report.ms_ssim));
        assert_eq!(report.per_class.len(), 2);
        for row in &report.per_class {
            assert_eq!(row.n_gen, 3);
            assert_eq!(row.n_real, 5);
            assert!(row.fid >= 0.0);
        }
        assert!(report.meta.small_sample);
        assert_eq!(report.meta.ms_ssim_scales, 2);
        assert_eq!(report.meta.config_sha256.len(), 64);

        let again = evaluate_run(&ckpt, &mut ds, &extractor, &opts).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn evaluate_run_covers_diffusion_checkpoints() {
        let data_dir = tempdir().unwrap();
        let mut ds = tiny_dataset(data_dir.path(), 4, 32);
        let run_dir = tempdir().unwrap();
        let ckpt = quick_checkpoint(data_dir.path(), run_dir.path(), ModelKind::CdiffPose);
        let extractor = SmallCnn::train_on(&ds, 1, 3).unwrap();
        let opts = EvalOptions { n_per_class: 2, sample_steps: Some(3), batch_size: 2, seed: 5 };
        let report = evaluate_run(&ckpt, &mut ds, &extractor, &opts).unwrap();
        assert_eq!(report.model, "cdiff_pose");
        assert!(report.fid.is_finite());
        assert_eq!(report.meta.sample_steps, Some(3));
    }

    #[test]
    fn evaluate_run_rejects_mismatched_dataset() {
        let data_dir = tempdir().unwrap();
        tiny_dataset(data_dir.path(), 4, 32);
        let run_dir = tempdir().unwrap();
        let ckpt = quick_checkpoint(data_dir.path(), run_dir.path(), ModelKind::Cgan);

        let other_dir = tempdir().unwrap();
        let cfg = SynthConfig { num_classes: 2, per_class: 4, image_size: 64, seed: 3 };
        let mut other = generate_dataset(other_dir.path(), &cfg).unwrap();
        let extractor = SmallCnn::train_on(&other, 1, 3).unwrap();
        let opts = EvalOptions { n_per_class: 2, sample_steps: None, batch_size: 2, seed: 0 };
        let err = evaluate_run(&ckpt, &mut other, &extractor, &opts).unwrap_err();
        assert!(err.to_string().contains("px"), "{err}");
    }
}
