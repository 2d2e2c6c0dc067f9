//! Synthetic codified-posture dataset: bank construction, rendering, and
//! dataset generation/loading.
//!
//! Each class is one canonical stick-figure posture built by forward
//! kinematics over the 15-joint skeleton. Samples jitter the canonical
//! joint angles slightly, then render the figure with one saturated,
//! class-independent color per joint so keypoints can be recovered from
//! pixels alone. Everything is keyed off a single seed; regenerating with
//! the same configuration reproduces every byte.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{derive_seed, rng_from, tag};
use crate::skeleton::{
    relative_pose_features, CoordSpace, Pose, PoseRecord, SkeletonTopology,
};

/// Background gray in `[-1, 1]` units.
pub const BG_VALUE: f32 = -0.85;
/// Bone gray in `[-1, 1]` units. Grays never collide with the saturated
/// joint palette, which keeps color-matching unambiguous.
pub const BONE_VALUE: f32 = 0.2;
/// Joints inside the frame keep at least this margin, as a fraction of the
/// image side.
pub const BBOX_MARGIN: f64 = 0.05;
/// Minimum distance between any two joints of a canonical posture,
/// normalized units. Keeps the color discs from overlapping at render time.
pub const MIN_JOINT_DIST: f64 = 0.05;
/// Minimum relative-feature distance between any two canonical postures.
pub const MIN_CLASS_FEATURE_DIST: f64 = 0.7;

/// Dataset generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_classes: 20, per_class: 100, image_size: 128, seed: 0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Argument("num_classes must be >= 1".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Argument("per_class must be >= 1".into()));
        }
        if self.image_size < 32 || !self.image_size.is_power_of_two() {
            return Err(Error::Argument(format!(
                "image_size must be a power of two >= 32, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// One canonical posture of the bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostureSpec {
    pub class_id: usize,
    pub name: String,
    /// Kinematic parameters the posture was built from; jittering happens
    /// in this space so bone lengths stay exact.
    pub angles: FigureAngles,
    /// Canonical keypoints in normalized coordinates, all visible.
    pub pose: Pose,
}

/// Joint-angle parameterization of the stick figure, used by forward
/// kinematics. Angles are radians; limb angles measure from straight down
/// in image coordinates (y grows downward).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FigureAngles {
    pub torso_lean: f64,
    pub head_tilt: f64,
    /// Upper-arm world angles, left then right.
    pub arm_upper: [f64; 2],
    /// Elbow bend relative to the upper arm.
    pub arm_lower: [f64; 2],
    pub thigh: [f64; 2],
    /// Knee bend relative to the thigh.
    pub shin: [f64; 2],
}

impl FigureAngles {
    /// Adds independent Gaussian noise to every articulation.
    fn perturbed(&self, rng: &mut ChaCha20Rng, sigma: f64) -> Self {
        let normal = Normal::new(0.0f64, sigma).expect("valid sigma");
        let mut n = || normal.sample(rng);
        Self {
            torso_lean: self.torso_lean + n() * 0.5,
            head_tilt: self.head_tilt + n(),
            arm_upper: [self.arm_upper[0] + n(), self.arm_upper[1] + n()],
            arm_lower: [self.arm_lower[0] + n(), self.arm_lower[1] + n()],
            thigh: [self.thigh[0] + n(), self.thigh[1] + n()],
            shin: [self.shin[0] + n(), self.shin[1] + n()],
        }
    }
}

/// Limb lengths in torso units.
const LEN_HEAD: f64 = 0.35;
const LEN_SHOULDER: f64 = 0.30;
const LEN_UPPER_ARM: f64 = 0.42;
const LEN_FOREARM: f64 = 0.40;
const LEN_HIP: f64 = 0.24;
const LEN_THIGH: f64 = 0.52;
const LEN_SHIN: f64 = 0.50;
/// Torso length as a fraction of the image side.
const TORSO_NORM: f64 = 0.22;

fn unit_from_down(theta: f64) -> [f64; 2] {
    [theta.sin(), theta.cos()]
}

fn rot(v: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Places all 15 joints for the given angles. Pelvis sits at a fixed
/// anchor; everything else follows the kinematic chain.
fn forward_kinematics(angles: &FigureAngles) -> Pose {
    let l = TORSO_NORM;
    let pelvis = [0.5, 0.58];
    // torso points up (negative y) with a lean
    let up = [0.0, -1.0];
    let torso_dir = rot(up, angles.torso_lean);
    let neck = [pelvis[0] + l * torso_dir[0], pelvis[1] + l * torso_dir[1]];
    let head_dir = rot(torso_dir, angles.head_tilt);
    let head = [neck[0] + LEN_HEAD * l * head_dir[0], neck[1] + LEN_HEAD * l * head_dir[1]];

    let perp_left = rot(torso_dir, -std::f64::consts::FRAC_PI_2);
    let perp_right = rot(torso_dir, std::f64::consts::FRAC_PI_2);
    let place = |from: [f64; 2], dir: [f64; 2], len: f64| {
        [from[0] + len * l * dir[0], from[1] + len * l * dir[1]]
    };

    let l_shoulder = place(neck, perp_left, LEN_SHOULDER);
    let r_shoulder = place(neck, perp_right, LEN_SHOULDER);
    let l_elbow = place(l_shoulder, unit_from_down(angles.arm_upper[0]), LEN_UPPER_ARM);
    let r_elbow = place(r_shoulder, unit_from_down(angles.arm_upper[1]), LEN_UPPER_ARM);
    let l_wrist = place(
        l_elbow,
        unit_from_down(angles.arm_upper[0] + angles.arm_lower[0]),
        LEN_FOREARM,
    );
    let r_wrist = place(
        r_elbow,
        unit_from_down(angles.arm_upper[1] + angles.arm_lower[1]),
        LEN_FOREARM,
    );

    let l_hip = place(pelvis, perp_left, LEN_HIP);
    let r_hip = place(pelvis, perp_right, LEN_HIP);
    let l_knee = place(l_hip, unit_from_down(angles.thigh[0]), LEN_THIGH);
    let r_knee = place(r_hip, unit_from_down(angles.thigh[1]), LEN_THIGH);
    let l_ankle = place(l_knee, unit_from_down(angles.thigh[0] + angles.shin[0]), LEN_SHIN);
    let r_ankle = place(r_knee, unit_from_down(angles.thigh[1] + angles.shin[1]), LEN_SHIN);

    Pose::visible(
        vec![
            pelvis, neck, head, l_shoulder, l_elbow, l_wrist, r_shoulder, r_elbow, r_wrist,
            l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle,
        ],
        CoordSpace::Normalized,
    )
}

fn sample_angles(rng: &mut ChaCha20Rng) -> FigureAngles {
    FigureAngles {
        torso_lean: rng.random_range(-0.25..0.25),
        head_tilt: rng.random_range(-0.35..0.35),
        arm_upper: [rng.random_range(-2.8..2.8), rng.random_range(-2.8..2.8)],
        arm_lower: [rng.random_range(-1.8..1.8), rng.random_range(-1.8..1.8)],
        thigh: [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)],
        shin: [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)],
    }
}

fn min_pairwise_dist(pose: &Pose) -> f64 {
    let coords = pose.coords();
    let mut best = f64::INFINITY;
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let d = ((coords[i][0] - coords[j][0]).powi(2)
                + (coords[i][1] - coords[j][1]).powi(2))
            .sqrt();
            best = best.min(d);
        }
    }
    best
}

fn in_bbox(pose: &Pose, margin: f64) -> bool {
    pose.coords()
        .iter()
        .all(|c| c[0] >= margin && c[0] <= 1.0 - margin && c[1] >= margin && c[1] <= 1.0 - margin)
}

fn feature_distance(a: &Pose, b: &Pose, topo: &SkeletonTopology) -> Result<f64> {
    let fa = relative_pose_features(a, topo)?;
    let fb = relative_pose_features(b, topo)?;
    let mut sum = 0.0;
    for i in 0..fa.bone_length_ratios.len() {
        let d = fa.bone_length_ratios[i] - fb.bone_length_ratios[i];
        sum += d * d;
    }
    for i in 0..fa.joint_angles.len() {
        let d = fa.joint_angles[i] - fb.joint_angles[i];
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// Builds `num_classes` canonical postures by rejection sampling.
///
/// Accepted postures keep every joint inside the frame margin, every joint
/// pair at least [`MIN_JOINT_DIST`] apart, and every class pair at least
/// [`MIN_CLASS_FEATURE_DIST`] apart in relative-feature space.
pub fn make_posture_bank(
    num_classes: usize,
    seed: u64,
    topo: &SkeletonTopology,
) -> Result<Vec<PostureSpec>> {
    const MAX_ATTEMPTS: usize = 50_000;
    let mut rng = rng_from(seed, &[tag::DATASET, 0xBAu64]);
    let mut bank: Vec<PostureSpec> = Vec::with_capacity(num_classes);
    let mut attempts = 0usize;
    while bank.len() < num_classes {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "posture bank: only {} of {num_classes} classes after {MAX_ATTEMPTS} attempts",
                bank.len()
            )));
        }
        let angles = sample_angles(&mut rng);
        let pose = forward_kinematics(&angles);
        if !in_bbox(&pose, BBOX_MARGIN) || min_pairwise_dist(&pose) < MIN_JOINT_DIST {
            continue;
        }
        let mut distinct = true;
        for prev in &bank {
            if feature_distance(&pose, &prev.pose, topo)? < MIN_CLASS_FEATURE_DIST {
                distinct = false;
                break;
            }
        }
        if !distinct {
            continue;
        }
        let class_id = bank.len();
        bank.push(PostureSpec { class_id, name: format!("posture_{class_id:02}"), angles, pose });
    }
    Ok(bank)
}

/// Jittered variant of a canonical posture for one dataset sample.
///
/// Re-runs forward kinematics with perturbed joint angles, then applies a
/// small global rotation, scale, and translation about the pelvis. Retries
/// with shrinking jitter until the frame and joint-distance constraints
/// hold again, so the output is always renderable; after enough shrinkage
/// the canonical posture itself is returned.
pub fn jitter_posture(spec: &PostureSpec, sample_seed: u64) -> Pose {
    let mut attempt = 0u64;
    loop {
        let mut rng = rng_from(sample_seed, &[attempt]);
        let shrink = 0.8f64.powi(attempt as i32);
        let angles = spec.angles.perturbed(&mut rng, 0.05 * shrink);
        let fk = forward_kinematics(&angles);
        let pelvis = fk.coords()[0];

        let g_rot = rng.random_range(-0.06..0.06) * shrink;
        let g_scale = 1.0 + rng.random_range(-0.06..0.06) * shrink;
        let g_dx = rng.random_range(-0.02..0.02) * shrink;
        let g_dy = rng.random_range(-0.02..0.02) * shrink;
        let (s, c) = g_rot.sin_cos();
        let coords: Vec<[f64; 2]> = fk
            .coords()
            .iter()
            .map(|&[x, y]| {
                let (dx, dy) = (x - pelvis[0], y - pelvis[1]);
                [
                    pelvis[0] + g_scale * (c * dx - s * dy) + g_dx,
                    pelvis[1] + g_scale * (s * dx + c * dy) + g_dy,
                ]
            })
            .collect();
        let pose = Pose::visible(coords, CoordSpace::Normalized);
        if in_bbox(&pose, BBOX_MARGIN * 0.6) && min_pairwise_dist(&pose) >= MIN_JOINT_DIST * 0.8 {
            return pose;
        }
        attempt += 1;
        if attempt > 40 {
            return spec.pose.clone();
        }
    }
}

/// Per-joint colors in `[-1, 1]` RGB: evenly spaced fully saturated hues.
pub fn joint_palette(num_joints: usize) -> Array2<f32> {
    let mut pal = Array2::<f32>::zeros((num_joints, 3));
    for k in 0..num_joints {
        let h = 360.0 * k as f32 / num_joints as f32;
        let (r, g, b) = hsv_to_rgb(h, 1.0, 1.0);
        pal[[k, 0]] = r * 2.0 - 1.0;
        pal[[k, 1]] = g * 2.0 - 1.0;
        pal[[k, 2]] = b * 2.0 - 1.0;
    }
    pal
}

/// Standard HSV to RGB with all components in `[0, 1]` and hue in degrees.
fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Disc radius in pixels for a given image side.
pub fn disc_radius(size: u32) -> f32 {
    (size as f32 / 64.0).clamp(1.2, 4.0)
}

fn bone_half_width(size: u32) -> f32 {
    (size as f32 / 96.0).max(0.7)
}

/// Renders a normalized pose to an `[3, H, W]` tensor in `[-1, 1]`:
/// gray bones first, then one anti-aliased palette disc per visible joint.
pub fn render_posture(
    pose: &Pose,
    topo: &SkeletonTopology,
    palette: &Array2<f32>,
    size: u32,
) -> Result<Array3<f32>> {
    if pose.space() != CoordSpace::Normalized {
        return Err(Error::Argument("render_posture expects a normalized pose".into()));
    }
    if pose.joint_count() != topo.joint_count() || palette.nrows() != topo.joint_count() {
        return Err(Error::TopologyMismatch(format!(
            "pose {} joints, topology {}, palette {}",
            pose.joint_count(),
            topo.joint_count(),
            palette.nrows()
        )));
    }
    let s = size as usize;
    let mut canvas = Array3::<f32>::from_elem((3, s, s), BG_VALUE);
    let px = |c: f64| (c * size as f64) as f32;

    // bones as anti-aliased capsules
    let hw = bone_half_width(size);
    for &(a, b) in topo.bones() {
        if !(pose.visibility()[a] && pose.visibility()[b]) {
            continue;
        }
        let (ax, ay) = (px(pose.coords()[a][0]), px(pose.coords()[a][1]));
        let (bx, by) = (px(pose.coords()[b][0]), px(pose.coords()[b][1]));
        let (lo_x, hi_x) = ((ax.min(bx) - hw - 1.0).floor(), (ax.max(bx) + hw + 1.0).ceil());
        let (lo_y, hi_y) = ((ay.min(by) - hw - 1.0).floor(), (ay.max(by) + hw + 1.0).ceil());
        for row in lo_y.max(0.0) as usize..=(hi_y.min(s as f32 - 1.0) as usize) {
            for col in lo_x.max(0.0) as usize..=(hi_x.min(s as f32 - 1.0) as usize) {
                let (qx, qy) = (col as f32 + 0.5, row as f32 + 0.5);
                let d = dist_to_segment(qx, qy, ax, ay, bx, by);
                let cov = (hw - d + 0.5).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for ch in 0..3 {
                        let cur = canvas[[ch, row, col]];
                        canvas[[ch, row, col]] = cur * (1.0 - cov) + BONE_VALUE * cov;
                    }
                }
            }
        }
    }

    // joint discs on top
    let r = disc_radius(size);
    for k in 0..topo.joint_count() {
        if !pose.visibility()[k] {
            continue;
        }
        let (cx, cy) = (px(pose.coords()[k][0]), px(pose.coords()[k][1]));
        let (lo_x, hi_x) = ((cx - r - 1.0).floor(), (cx + r + 1.0).ceil());
        let (lo_y, hi_y) = ((cy - r - 1.0).floor(), (cy + r + 1.0).ceil());
        for row in lo_y.max(0.0) as usize..=(hi_y.min(s as f32 - 1.0) as usize) {
            for col in lo_x.max(0.0) as usize..=(hi_x.min(s as f32 - 1.0) as usize) {
                let (qx, qy) = (col as f32 + 0.5, row as f32 + 0.5);
                let d = ((qx - cx).powi(2) + (qy - cy).powi(2)).sqrt();
                let cov = (r - d + 0.5).clamp(0.0, 1.0);
                if cov > 0.0 {
                    for ch in 0..3 {
                        let cur = canvas[[ch, row, col]];
                        canvas[[ch, row, col]] = cur * (1.0 - cov) + palette[[k, ch]] * cov;
                    }
                }
            }
        }
    }
    Ok(canvas)
}

fn dist_to_segment(qx: f32, qy: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 <= f32::EPSILON {
        0.0
    } else {
        (((qx - ax) * vx + (qy - ay) * vy) / len2).clamp(0.0, 1.0)
    };
    let (px_, py_) = (ax + t * vx, ay + t * vy);
    ((qx - px_).powi(2) + (qy - py_).powi(2)).sqrt()
}

/// `[3, H, W]` tensor in `[-1, 1]` to 8-bit RGB rows.
pub fn tensor_to_rgb8(t: &Array3<f32>) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut out = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let v = ((t[[ch, row, col]] + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    out
}

/// 8-bit RGB buffer back to a `[3, H, W]` tensor in `[-1, 1]`.
pub fn rgb8_to_tensor(data: &[u8], width: u32, height: u32) -> Result<Array3<f32>> {
    let (w, h) = (width as usize, height as usize);
    if data.len() != w * h * 3 {
        return Err(Error::Argument(format!(
            "rgb buffer has {} bytes, expected {}",
            data.len(),
            w * h * 3
        )));
    }
    let mut t = Array3::<f32>::zeros((3, h, w));
    for row in 0..h {
        for col in 0..w {
            for ch in 0..3 {
                let v = data[(row * w + col) * 3 + ch] as f32;
                t[[ch, row, col]] = v / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(t)
}

pub fn save_png(path: &Path, t: &Array3<f32>) -> Result<()> {
    let (h, w) = (t.shape()[1] as u32, t.shape()[2] as u32);
    let buf = tensor_to_rgb8(t);
    let img = image::RgbImage::from_raw(w, h, buf)
        .ok_or_else(|| Error::Generation("pixel buffer does not match dimensions".into()))?;
    img.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })?
        .to_rgb8();
    rgb8_to_tensor(img.as_raw(), img.width(), img.height())
}

/// Train/validation split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Load(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub class_id: usize,
    pub split: Split,
}

/// Sidecar metadata written next to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: u32,
    pub seed: u64,
    pub joint_count: usize,
}

pub const DATASET_FORMAT: &str = "posekey-dataset-v1";

/// A generated dataset on disk, with annotations loaded into memory and
/// image tensors decoded on demand.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub entries: Vec<ManifestEntry>,
    /// Pixel-space poses aligned with `entries`.
    pub poses: Vec<Pose>,
    pub bank: Vec<PostureSpec>,
    cache: Option<Vec<Array3<f32>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices_for(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.entries[idx].image_path)
    }

    /// Image tensor `[3, H, W]` in `[-1, 1]`; decodes from disk unless
    /// [`Dataset::preload`] ran first.
    pub fn image(&self, idx: usize) -> Result<Array3<f32>> {
        if let Some(cache) = &self.cache {
            return Ok(cache[idx].clone());
        }
        load_png(&self.image_path(idx))
    }

    /// Decodes every image into memory. Worth it whenever the whole set
    /// fits comfortably; call before a training loop.
    pub fn preload(&mut self) -> Result<()> {
        if self.cache.is_some() {
            return Ok(());
        }
        let mut cache = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            cache.push(load_png(&self.image_path(i))?);
        }
        self.cache = Some(cache);
        Ok(())
    }

    /// Normalized-space pose for a sample.
    pub fn normalized_pose(&self, idx: usize) -> Result<Pose> {
        let dims = (self.meta.image_size, self.meta.image_size);
        let (pose, _) = crate::skeleton::normalize_keypoints(&self.poses[idx], dims)?;
        Ok(pose)
    }
}

/// Generates the dataset under `out_dir`: `images/*.png`, `poses.jsonl`,
/// `manifest.csv`, `meta.json`, and `bank.json`.
pub fn generate_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let topo = SkeletonTopology::human15();
    let bank = make_posture_bank(cfg.num_classes, cfg.seed, &topo)?;
    let palette = joint_palette(topo.joint_count());

    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut entries = Vec::with_capacity(cfg.num_classes * cfg.per_class);
    let mut poses = Vec::with_capacity(entries.capacity());
    let mut pose_lines = Vec::with_capacity(entries.capacity());

    for spec in &bank {
        for i in 0..cfg.per_class {
            let sample_seed =
                derive_seed(cfg.seed, &[tag::DATASET, spec.class_id as u64, i as u64]);
            let pose = jitter_posture(spec, sample_seed);
            let tensor = render_posture(&pose, &topo, &palette, cfg.image_size)?;
            let rel = format!("images/c{:03}_s{i:05}.png", spec.class_id);
            save_png(&out_dir.join(&rel), &tensor)?;

            let dims = (cfg.image_size, cfg.image_size);
            let pixel_pose = crate::skeleton::denormalize_keypoints(&pose, dims)?;
            pose_lines.push(
                serde_json::to_string(&PoseRecord::from_pose(&rel, &pixel_pose))
                    .map_err(|e| Error::Generation(format!("pose record: {e}")))?,
            );
            // every tenth sample per class goes to validation
            let split = if i % 10 == 9 { Split::Val } else { Split::Train };
            entries.push(ManifestEntry { image_path: rel, class_id: spec.class_id, split });
            poses.push(pixel_pose);
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest_path).map_err(|e| {
        Error::io(&manifest_path, std::io::Error::other(e))
    })?;
    w.write_record(["image_path", "class_id", "split"])
        .and_then(|()| {
            entries.iter().try_for_each(|e| {
                w.write_record([e.image_path.as_str(), &e.class_id.to_string(), &e.split.to_string()])
            })
        })
        .map_err(|e| Error::io(&manifest_path, std::io::Error::other(e)))?;
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;
    drop(w);

    let poses_path = out_dir.join("poses.jsonl");
    let mut f = fs::File::create(&poses_path).map_err(|e| Error::io(&poses_path, e))?;
    for line in &pose_lines {
        writeln!(f, "{line}").map_err(|e| Error::io(&poses_path, e))?;
    }

    let meta = DatasetMeta {
        format: DATASET_FORMAT.to_string(),
        num_classes: cfg.num_classes,
        per_class: cfg.per_class,
        image_size: cfg.image_size,
        seed: cfg.seed,
        joint_count: topo.joint_count(),
    };
    let meta_path = out_dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable"))
        .map_err(|e| Error::io(&meta_path, e))?;
    let bank_path = out_dir.join("bank.json");
    fs::write(&bank_path, serde_json::to_string_pretty(&bank).expect("serializable"))
        .map_err(|e| Error::io(&bank_path, e))?;

    Ok(Dataset { root: out_dir.to_path_buf(), meta, entries, poses, bank, cache: None })
}

/// Loads and validates a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )
    .map_err(|e| Error::Load(format!("meta.json: {e}")))?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::Load(format!(
            "unsupported dataset format {:?}, expected {DATASET_FORMAT:?}",
            meta.format
        )));
    }

    let bank_path = dir.join("bank.json");
    let bank: Vec<PostureSpec> = serde_json::from_str(
        &fs::read_to_string(&bank_path).map_err(|e| Error::io(&bank_path, e))?,
    )
    .map_err(|e| Error::Load(format!("bank.json: {e}")))?;
    if bank.len() != meta.num_classes {
        return Err(Error::Load(format!(
            "bank has {} postures, meta declares {}",
            bank.len(),
            meta.num_classes
        )));
    }

    let manifest_path = dir.join("manifest.csv");
    let mut rdr = csv::Reader::from_path(&manifest_path)
        .map_err(|e| Error::io(&manifest_path, std::io::Error::other(e)))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Load(format!("manifest.csv: {e}")))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["image_path", "class_id", "split"] {
        return Err(Error::Load(format!("manifest.csv has unexpected header {headers:?}")));
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Load(format!("manifest.csv: {e}")))?;
        let class_id: usize = rec[1]
            .parse()
            .map_err(|_| Error::Load(format!("manifest.csv: bad class_id {:?}", &rec[1])))?;
        if class_id >= meta.num_classes {
            return Err(Error::Load(format!(
                "manifest.csv: class_id {class_id} out of range for {} classes",
                meta.num_classes
            )));
        }
        entries.push(ManifestEntry {
            image_path: rec[0].to_string(),
            class_id,
            split: rec[2].parse()?,
        });
    }

    let poses_path = dir.join("poses.jsonl");
    let reader =
        BufReader::new(fs::File::open(&poses_path).map_err(|e| Error::io(&poses_path, e))?);
    let mut poses = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&poses_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Load(format!("poses.jsonl line {}: {e}", lineno + 1)))?;
        if lineno >= entries.len() || rec.image != entries[lineno].image_path {
            return Err(Error::Load(format!(
                "poses.jsonl line {} does not match manifest order",
                lineno + 1
            )));
        }
        if rec.keypoints.len() != meta.joint_count {
            return Err(Error::Load(format!(
                "poses.jsonl line {}: {} keypoints, expected {}",
                lineno + 1,
                rec.keypoints.len(),
                meta.joint_count
            )));
        }
        poses.push(rec.to_pose()?);
    }
    if poses.len() != entries.len() {
        return Err(Error::Load(format!(
            "{} pose records for {} manifest rows",
            poses.len(),
            entries.len()
        )));
    }
    for e in &entries {
        let p = dir.join(&e.image_path);
        if !p.is_file() {
            return Err(Error::Load(format!("missing image file {:?}", e.image_path)));
        }
    }

    Ok(Dataset { root: dir.to_path_buf(), meta, entries, poses, bank, cache: None })
}
