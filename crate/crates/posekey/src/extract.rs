//! Keypoint extraction from rendered images.
//!
//! Joints are color-coded, so extraction is color matching followed by a
//! soft-argmax: per-joint scores `-(pixel - palette_k)^2` become a softmax
//! over all pixels at temperature `tau`, and the expected pixel coordinate
//! under that distribution is the keypoint. The whole chain is
//! differentiable, which is what lets the keypoint and pose-consistency
//! losses push gradients back into a generator.
//!
//! Two implementations live here: a pure `f64` reference used by
//! evaluation and as the test oracle, and a batched [`Graph`] version used
//! inside training objectives. Visibility is a hard threshold on how much
//! probability mass concentrates in one window, and deliberately carries
//! no gradient.

use ndarray::{Array2, Array3, ArrayD, Ix3};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::skeleton::{CoordSpace, Pose, SkeletonTopology};

/// Extraction settings; the defaults match the values used everywhere.
#[derive(Debug, Clone, Copy)]
pub struct ExtractConfig {
    /// Softmax temperature over pixel scores.
    pub tau: f32,
    /// Minimum best-window probability mass for a joint to count as visible.
    pub theta_vis: f64,
    /// Side of the square window used for the visibility test.
    pub window: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { tau: 0.05, theta_vis: 0.5, window: 5 }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Argument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.theta_vis) {
            return Err(Error::Argument(format!(
                "theta_vis must be in [0, 1], got {}",
                self.theta_vis
            )));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Argument(format!("window must be odd, got {}", self.window)));
        }
        Ok(())
    }
}

/// Result of the reference extractor.
#[derive(Debug, Clone)]
pub struct ExtractedPose {
    /// Normalized pose; visibility reflects the window-mass test.
    pub pose: Pose,
    /// Best 5x5 window mass per joint, before thresholding.
    pub window_mass: Vec<f64>,
}

/// Pixel-center coordinate grid `[H*W, 2]` in normalized units, row-major
/// flattening (`p = row * w + col`), matching the renderer's convention.
pub fn coord_grid(h: usize, w: usize) -> Array2<f32> {
    let mut grid = Array2::<f32>::zeros((h * w, 2));
    for row in 0..h {
        for col in 0..w {
            let p = row * w + col;
            grid[[p, 0]] = (col as f32 + 0.5) / w as f32;
            grid[[p, 1]] = (row as f32 + 0.5) / h as f32;
        }
    }
    grid
}

/// Reference soft-argmax extractor over one `[3, H, W]` image in `[-1, 1]`.
/// All accumulation runs in `f64`.
pub fn soft_argmax_extract(
    img: &Array3<f32>,
    palette: &Array2<f32>,
    cfg: &ExtractConfig,
) -> Result<ExtractedPose> {
    cfg.validate()?;
    let shape = img.shape();
    if shape[0] != palette.ncols() {
        return Err(Error::Argument(format!(
            "image has {} channels, palette expects {}",
            shape[0],
            palette.ncols()
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = palette.nrows();
    let inv_tau = 1.0 / cfg.tau as f64;

    let mut coords = Vec::with_capacity(k);
    let mut vis = Vec::with_capacity(k);
    let mut masses = Vec::with_capacity(k);
    let mut probs = vec![0.0f64; h * w];
    for joint in 0..k {
        // scores and stable softmax in one pass over pixels
        let mut max_score = f64::NEG_INFINITY;
        for row in 0..h {
            for col in 0..w {
                let mut d2 = 0.0f64;
                for ch in 0..c {
                    let d = img[[ch, row, col]] as f64 - palette[[joint, ch]] as f64;
                    d2 += d * d;
                }
                let s = -d2 * inv_tau;
                probs[row * w + col] = s;
                max_score = max_score.max(s);
            }
        }
        let mut z = 0.0f64;
        for p in probs.iter_mut() {
            *p = (*p - max_score).exp();
            z += *p;
        }
        let (mut ex, mut ey) = (0.0f64, 0.0f64);
        for row in 0..h {
            for col in 0..w {
                let p = probs[row * w + col] / z;
                probs[row * w + col] = p;
                ex += p * (col as f64 + 0.5) / w as f64;
                ey += p * (row as f64 + 0.5) / h as f64;
            }
        }
        let mass = max_window_mass(&probs, h, w, cfg.window);
        coords.push([ex, ey]);
        vis.push(mass >= cfg.theta_vis);
        masses.push(mass);
    }
    let pose = Pose::new(coords, vis, CoordSpace::Normalized)?;
    Ok(ExtractedPose { pose, window_mass: masses })
}

/// Largest sum of `probs` over any `window x window` square (clipped at the
/// borders), via an integral image.
fn max_window_mass(probs: &[f64], h: usize, w: usize, window: usize) -> f64 {
    let mut integral = vec![0.0f64; (h + 1) * (w + 1)];
    for row in 0..h {
        for col in 0..w {
            integral[(row + 1) * (w + 1) + col + 1] = probs[row * w + col]
                + integral[row * (w + 1) + col + 1]
                + integral[(row + 1) * (w + 1) + col]
                - integral[row * (w + 1) + col];
        }
    }
    let half = window / 2;
    let rect = |r0: usize, r1: usize, c0: usize, c1: usize| {
        integral[(r1 + 1) * (w + 1) + c1 + 1] + integral[r0 * (w + 1) + c0]
            - integral[r0 * (w + 1) + c1 + 1]
            - integral[(r1 + 1) * (w + 1) + c0]
    };
    let mut best = 0.0f64;
    for row in 0..h {
        for col in 0..w {
            let r0 = row.saturating_sub(half);
            let r1 = (row + half).min(h - 1);
            let c0 = col.saturating_sub(half);
            let c1 = (col + half).min(w - 1);
            best = best.max(rect(r0, r1, c0, c1));
        }
    }
    best
}

/// Visibility masks from a batch of per-joint pixel distributions
/// `[B, K, H*W]`, using the same window-mass rule as the reference path.
pub fn visibility_from_probs(
    probs: &ArrayD<f32>,
    h: usize,
    w: usize,
    cfg: &ExtractConfig,
) -> Result<Array2<bool>> {
    let shape = probs.shape();
    if shape.len() != 3 || shape[2] != h * w {
        return Err(Error::Argument(format!(
            "probs shape {shape:?} does not match {h}x{w} pixels"
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    let view = probs.view().into_dimensionality::<Ix3>().unwrap();
    let mut out = Array2::<bool>::from_elem((b, k), false);
    let mut buf = vec![0.0f64; h * w];
    for bb in 0..b {
        for kk in 0..k {
            for (dst, &src) in buf.iter_mut().zip(view.index_axis(ndarray::Axis(0), bb).index_axis(ndarray::Axis(0), kk)) {
                *dst = src as f64;
            }
            out[[bb, kk]] = max_window_mass(&buf, h, w, cfg.window) >= cfg.theta_vis;
        }
    }
    Ok(out)
}

/// Differentiable batched extraction: expected normalized coordinates and
/// the per-joint pixel distributions.
pub struct GraphExtraction {
    /// `[B, K, 2]` expected coordinates, normalized.
    pub coords: Var,
    /// `[B, K, H*W]` softmax weights.
    pub probs: Var,
}

/// Soft-argmax over a batched image var `[B, 3, H, W]`.
pub fn soft_argmax_graph(
    g: &mut Graph,
    img: Var,
    palette: &Array2<f32>,
    cfg: &ExtractConfig,
) -> Result<GraphExtraction> {
    cfg.validate()?;
    let shape = g.shape(img).to_vec();
    if shape.len() != 4 || shape[1] != palette.ncols() {
        return Err(Error::Argument(format!(
            "soft_argmax_graph: image shape {shape:?} vs palette {:?}",
            palette.shape()
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = palette.nrows();
    let flat = g.reshape(img, &[b, c, h * w])?;
    let scores = g.color_scores(flat, palette)?;
    let scaled = g.scale(scores, 1.0 / cfg.tau);
    let probs = g.softmax_last(scaled)?;
    let grid = g.constant(coord_grid(h, w).into_dyn());
    let probs2 = g.reshape(probs, &[b * k, h * w])?;
    let coords2 = g.matmul(probs2, grid)?;
    let coords = g.reshape(coords2, &[b, k, 2])?;
    Ok(GraphExtraction { coords, probs })
}

/// Keypoint alignment loss on a batch: per sample, the mean over masked
/// joints of the squared coordinate distance; averaged over the samples
/// with at least one masked joint. Returns a constant zero if the mask is
/// empty everywhere.
pub fn keypoint_loss_graph(
    g: &mut Graph,
    coords: Var,
    target: &Array3<f32>,
    mask: &Array2<bool>,
) -> Result<Var> {
    let shape = g.shape(coords).to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::Argument(format!("keypoint_loss_graph: coords shape {shape:?}")));
    }
    let (b, k) = (shape[0], shape[1]);
    if target.shape() != [b, k, 2] || mask.shape() != [b, k] {
        return Err(Error::Argument(format!(
            "keypoint_loss_graph: target {:?} / mask {:?} for coords {shape:?}",
            target.shape(),
            mask.shape()
        )));
    }
    let counts: Vec<usize> = (0..b).map(|bb| (0..k).filter(|&kk| mask[[bb, kk]]).count()).collect();
    let active = counts.iter().filter(|&&c| c > 0).count();
    if active == 0 {
        return Ok(g.constant(ndarray::arr0(0.0f32).into_dyn()));
    }
    let mut weights = Array2::<f32>::zeros((b, k));
    for bb in 0..b {
        if counts[bb] == 0 {
            continue;
        }
        for kk in 0..k {
            if mask[[bb, kk]] {
                weights[[bb, kk]] = 1.0 / (counts[bb] * active) as f32;
            }
        }
    }
    let t = g.constant(target.clone().into_dyn());
    let d = g.sub(coords, t)?;
    let sq = g.mul(d, d)?;
    let per_joint = g.sum_last(sq)?; // [B, K]
    let wv = g.constant(weights.into_dyn());
    let weighted = g.mul(per_joint, wv)?;
    Ok(g.sum_all(weighted))
}

/// Relative pose features computed in-graph from `[B, K, 2]` coordinates.
pub struct GraphPoseFeatures {
    /// `[B, bones]` bone-length ratios against the torso bone.
    pub ratios: Var,
    /// `[B, triples]` unsigned joint angles.
    pub angles: Var,
}

/// Smoothing added under square roots; keeps lengths differentiable at
/// zero and bounds the torso denominator away from it.
const LEN_EPS2: f32 = 1e-12;

pub fn pose_features_graph(
    g: &mut Graph,
    coords: Var,
    topo: &SkeletonTopology,
) -> Result<GraphPoseFeatures> {
    let shape = g.shape(coords).to_vec();
    if shape.len() != 3 || shape[1] != topo.joint_count() || shape[2] != 2 {
        return Err(Error::Argument(format!(
            "pose_features_graph: coords shape {shape:?} for K={}",
            topo.joint_count()
        )));
    }
    let nb = topo.bones().len();
    let heads: Vec<usize> = topo.bones().iter().map(|&(a, _)| a).collect();
    let tails: Vec<usize> = topo.bones().iter().map(|&(_, b)| b).collect();
    let ha = g.index_select(coords, 1, &heads)?;
    let tb = g.index_select(coords, 1, &tails)?;
    let d = g.sub(ha, tb)?;
    let sq = g.mul(d, d)?;
    let len2 = g.sum_last(sq)?; // [B, bones]
    let len = g.sqrt_eps(len2, LEN_EPS2);
    let torso_rep = g.index_select(len, 1, &vec![topo.torso_edge(); nb])?;
    let ratios = g.div(len, torso_rep)?;

    let (ja, jp, jb): (Vec<usize>, Vec<usize>, Vec<usize>) = {
        let mut a = Vec::new();
        let mut p = Vec::new();
        let mut b = Vec::new();
        for &(x, y, z) in topo.angle_triples() {
            a.push(x);
            p.push(y);
            b.push(z);
        }
        (a, p, b)
    };
    let ca = g.index_select(coords, 1, &ja)?;
    let cp = g.index_select(coords, 1, &jp)?;
    let cb = g.index_select(coords, 1, &jb)?;
    let u = g.sub(ca, cp)?;
    let v = g.sub(cb, cp)?;
    let uv = g.mul(u, v)?;
    let dot = g.sum_last(uv)?;
    let uu = g.mul(u, u)?;
    let uu = g.sum_last(uu)?;
    let nu = g.sqrt_eps(uu, LEN_EPS2);
    let vv = g.mul(v, v)?;
    let vv = g.sum_last(vv)?;
    let nv = g.sqrt_eps(vv, LEN_EPS2);
    let denom = g.mul(nu, nv)?;
    let cos = g.div(dot, denom)?;
    let angles = g.acos_clamped(cos);
    Ok(GraphPoseFeatures { ratios, angles })
}

/// Pose consistency loss on a batch: per sample, the sum of squared
/// differences over features valid on both sides; averaged over samples.
pub fn pose_consistency_graph(
    g: &mut Graph,
    feats: &GraphPoseFeatures,
    target_ratios: &Array2<f32>,
    target_angles: &Array2<f32>,
    ratio_valid: &Array2<bool>,
    angle_valid: &Array2<bool>,
) -> Result<Var> {
    let rs = g.shape(feats.ratios).to_vec();
    let as_ = g.shape(feats.angles).to_vec();
    if target_ratios.shape() != rs.as_slice() || ratio_valid.shape() != rs.as_slice() {
        return Err(Error::Argument(format!(
            "pose_consistency_graph: ratio targets {:?} for features {rs:?}",
            target_ratios.shape()
        )));
    }
    if target_angles.shape() != as_.as_slice() || angle_valid.shape() != as_.as_slice() {
        return Err(Error::Argument(format!(
            "pose_consistency_graph: angle targets {:?} for features {as_:?}",
            target_angles.shape()
        )));
    }
    let b = rs[0] as f32;
    let rweights = ratio_valid.mapv(|m| if m { 1.0f32 / b } else { 0.0 });
    let aweights = angle_valid.mapv(|m| if m { 1.0f32 / b } else { 0.0 });

    let tr = g.constant(target_ratios.clone().into_dyn());
    let dr = g.sub(feats.ratios, tr)?;
    let sqr = g.mul(dr, dr)?;
    let wr = g.constant(rweights.into_dyn());
    let mr = g.mul(sqr, wr)?;
    let sum_r = g.sum_all(mr);

    let ta = g.constant(target_angles.clone().into_dyn());
    let da = g.sub(feats.angles, ta)?;
    let sqa = g.mul(da, da)?;
    let wa = g.constant(aweights.into_dyn());
    let ma = g.mul(sqa, wa)?;
    let sum_a = g.sum_all(ma);

    g.weighted_sum(&[(sum_r, 1.0), (sum_a, 1.0)])
}

/// Convenience for tests and evaluation: extract and keep only the pose.
pub fn extract_pose(img: &Array3<f32>, palette: &Array2<f32>, cfg: &ExtractConfig) -> Result<Pose> {
    Ok(soft_argmax_extract(img, palette, cfg)?.pose)
}

/// Batch-stacked relative-feature targets: bone-length ratios, joint
/// angles, and their validity masks.
pub type FeatureTargets = (Array2<f32>, Array2<f32>, Array2<bool>, Array2<bool>);

/// Per-sample relative-feature targets in `f32`, from ground-truth poses.
/// Returns ratio/angle values plus validity masks, batch-stacked.
pub fn feature_targets(poses: &[Pose], topo: &SkeletonTopology) -> Result<FeatureTargets> {
    let b = poses.len();
    let nb = topo.bones().len();
    let na = topo.angle_triples().len();
    let mut ratios = Array2::<f32>::zeros((b, nb));
    let mut angles = Array2::<f32>::zeros((b, na));
    let mut rvalid = Array2::<bool>::from_elem((b, nb), false);
    let mut avalid = Array2::<bool>::from_elem((b, na), false);
    for (i, pose) in poses.iter().enumerate() {
        let f = crate::skeleton::relative_pose_features(pose, topo)?;
        for j in 0..nb {
            ratios[[i, j]] = f.bone_length_ratios[j] as f32;
            rvalid[[i, j]] = f.ratio_valid[j];
        }
        for j in 0..na {
            angles[[i, j]] = f.joint_angles[j] as f32;
            avalid[[i, j]] = f.angle_valid[j];
        }
    }
    Ok((ratios, angles, rvalid, avalid))
}

/// Batch-stacked `[B, K, 2]` coordinate targets and `[B, K]` visibility
/// from normalized poses.
pub fn coordinate_targets(poses: &[Pose]) -> Result<(Array3<f32>, Array2<bool>)> {
    let b = poses.len();
    if b == 0 {
        return Err(Error::Argument("coordinate_targets: empty pose list".into()));
    }
    let k = poses[0].joint_count();
    let mut coords = Array3::<f32>::zeros((b, k, 2));
    let mut vis = Array2::<bool>::from_elem((b, k), false);
    for (i, pose) in poses.iter().enumerate() {
        if pose.joint_count() != k {
            return Err(Error::TopologyMismatch(format!(
                "pose {i} has {} joints, expected {k}",
                pose.joint_count()
            )));
        }
        for (j, (&[x, y], &v)) in pose.coords().iter().zip(pose.visibility()).enumerate() {
            coords[[i, j, 0]] = x as f32;
            coords[[i, j, 1]] = y as f32;
            vis[[i, j]] = v;
        }
    }
    Ok((coords, vis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use crate::skeleton::{keypoint_loss, visibility_mask};
    use crate::synth::{joint_palette, make_posture_bank, render_posture};
    use ndarray::{Array4, Axis};
    use rand::Rng;

    fn topo() -> SkeletonTopology {
        SkeletonTopology::human15()
    }

    #[test]
    fn config_validation() {
        assert!(ExtractConfig::default().validate().is_ok());
        assert!(ExtractConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(ExtractConfig { window: 4, ..Default::default() }.validate().is_err());
        assert!(ExtractConfig { theta_vis: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn recovers_rendered_keypoints_at_128() {
        let t = topo();
        let bank = make_posture_bank(5, 2, &t).unwrap();
        let pal = joint_palette(t.joint_count());
        let cfg = ExtractConfig::default();
        for spec in &bank {
            let img = render_posture(&spec.pose, &t, &pal, 128).unwrap();
            let ex = soft_argmax_extract(&img, &pal, &cfg).unwrap();
            assert!(ex.pose.visibility().iter().all(|&v| v), "class {}", spec.class_id);
            let mask = visibility_mask(&ex.pose, &spec.pose).unwrap();
            let err = keypoint_loss(&ex.pose, &spec.pose, &mask).unwrap();
            // mean squared error under one pixel at 128 means sqrt under 1/128
            let rmse = err.value.sqrt();
            assert!(rmse < 1.0 / 128.0, "class {}: rmse {rmse}", spec.class_id);
            for (k, &m) in ex.window_mass.iter().enumerate() {
                assert!(m > 0.8, "class {} joint {k} mass {m}", spec.class_id);
            }
        }
    }

    #[test]
    fn recovers_rendered_keypoints_at_64() {
        let t = topo();
        let bank = make_posture_bank(3, 9, &t).unwrap();
        let pal = joint_palette(t.joint_count());
        let cfg = ExtractConfig::default();
        for spec in &bank {
            let img = render_posture(&spec.pose, &t, &pal, 64).unwrap();
            let ex = soft_argmax_extract(&img, &pal, &cfg).unwrap();
            assert!(ex.pose.visibility().iter().all(|&v| v));
            let mask = visibility_mask(&ex.pose, &spec.pose).unwrap();
            let err = keypoint_loss(&ex.pose, &spec.pose, &mask).unwrap();
            assert!(err.value.sqrt() < 1.0 / 64.0, "rmse {}", err.value.sqrt());
        }
    }

    #[test]
    fn noise_image_has_no_visible_joints() {
        let mut rng = rng_from(4, &[]);
        let mut img = Array3::<f32>::zeros((3, 64, 64));
        img.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let pal = joint_palette(15);
        let ex = soft_argmax_extract(&img, &pal, &ExtractConfig::default()).unwrap();
        assert!(ex.pose.visibility().iter().all(|&v| !v));
        assert!(ex.window_mass.iter().all(|&m| m < 0.5));
    }

    #[test]
    fn graph_extraction_matches_reference() {
        let t = topo();
        let bank = make_posture_bank(2, 6, &t).unwrap();
        let pal = joint_palette(t.joint_count());
        let cfg = ExtractConfig::default();
        let imgs: Vec<Array3<f32>> = bank
            .iter()
            .map(|s| render_posture(&s.pose, &t, &pal, 64).unwrap())
            .collect();
        let mut batch = Array4::<f32>::zeros((2, 3, 64, 64));
        for (i, img) in imgs.iter().enumerate() {
            batch.index_axis_mut(Axis(0), i).assign(img);
        }
        let mut g = Graph::inference();
        let bvar = g.constant(batch.into_dyn());
        let ext = soft_argmax_graph(&mut g, bvar, &pal, &cfg).unwrap();
        let coords = g.value(ext.coords).clone();
        for (i, img) in imgs.iter().enumerate() {
            let reference = soft_argmax_extract(img, &pal, &cfg).unwrap();
            for (k, c) in reference.pose.coords().iter().enumerate() {
                let gx = coords[[i, k, 0]] as f64;
                let gy = coords[[i, k, 1]] as f64;
                assert!(
                    (gx - c[0]).abs() < 2e-5 && (gy - c[1]).abs() < 2e-5,
                    "sample {i} joint {k}: graph ({gx},{gy}) vs reference {c:?}"
                );
            }
        }

        // visibility from the graph probabilities agrees with the reference
        let vis = visibility_from_probs(g.value(ext.probs), 64, 64, &cfg).unwrap();
        for i in 0..2 {
            let reference = soft_argmax_extract(&imgs[i], &pal, &cfg).unwrap();
            for k in 0..15 {
                assert_eq!(vis[[i, k]], reference.pose.visibility()[k]);
            }
        }
    }

    #[test]
    fn extraction_gradient_matches_finite_differences() {
        // small two-joint toy so full FD stays cheap
        let pal = ndarray::arr2(&[[1.0f32, -1.0, -1.0], [-1.0, 1.0, -1.0]]);
        let cfg = ExtractConfig { tau: 0.1, ..Default::default() };
        let mut rng = rng_from(8, &[]);
        let mut img = Array4::<f32>::from_elem((1, 3, 12, 12), -0.9);
        // two colored blobs plus light noise
        for (cx, cy, joint) in [(3usize, 4usize, 0usize), (8, 7, 1)] {
            for dr in 0..2usize {
                for dc in 0..2usize {
                    for ch in 0..3 {
                        img[[0, ch, cy + dr, cx + dc]] = pal[[joint, ch]] * 0.95;
                    }
                }
            }
        }
        img.mapv_inplace(|v| v + 0.01 * rng.random_range(-1.0..1.0f32));

        let probe = {
            let mut p = ndarray::Array3::<f32>::zeros((1, 2, 2));
            p.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            p
        };
        let loss_of = |img: &Array4<f32>| -> f32 {
            let mut g = Graph::inference();
            let iv = g.constant(img.clone().into_dyn());
            let ext = soft_argmax_graph(&mut g, iv, &pal, &cfg).unwrap();
            let pc = g.constant(probe.clone().into_dyn());
            let prod = g.mul(ext.coords, pc).unwrap();
            let l = g.sum_all(prod);
            g.value(l).first().copied().unwrap()
        };

        let mut g = Graph::new();
        let iv = g.param(img.clone().into_dyn());
        let ext = soft_argmax_graph(&mut g, iv, &pal, &cfg).unwrap();
        let pc = g.constant(probe.clone().into_dyn());
        let prod = g.mul(ext.coords, pc).unwrap();
        let l = g.sum_all(prod);
        let mut store = g.backward(l).unwrap();
        let analytic = store.take(iv).unwrap();

        let h = 1e-3f32;
        let mut checked = 0;
        for ch in 0..3 {
            for row in (0..12).step_by(3) {
                for col in (0..12).step_by(3) {
                    let mut plus = img.clone();
                    let mut minus = img.clone();
                    plus[[0, ch, row, col]] += h;
                    minus[[0, ch, row, col]] -= h;
                    let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let an = analytic[[0, ch, row, col]];
                    let err = (fd - an).abs();
                    let bound = 1e-4 + 1e-2 * fd.abs().max(an.abs());
                    assert!(
                        err <= bound,
                        "pixel ({ch},{row},{col}): analytic {an:.6} vs fd {fd:.6}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 48);
    }

    #[test]
    fn graph_features_match_f64_reference() {
        let t = topo();
        let bank = make_posture_bank(3, 12, &t).unwrap();
        let poses: Vec<Pose> = bank.iter().map(|s| s.pose.clone()).collect();
        let (coords, _) = coordinate_targets(&poses).unwrap();
        let mut g = Graph::inference();
        let cv = g.constant(coords.into_dyn());
        let feats = pose_features_graph(&mut g, cv, &t).unwrap();
        for (i, pose) in poses.iter().enumerate() {
            let reference = crate::skeleton::relative_pose_features(pose, &t).unwrap();
            for j in 0..t.bones().len() {
                let got = g.value(feats.ratios)[[i, j]] as f64;
                assert!(
                    (got - reference.bone_length_ratios[j]).abs() < 1e-4,
                    "sample {i} ratio {j}: {got} vs {}",
                    reference.bone_length_ratios[j]
                );
            }
            for j in 0..t.angle_triples().len() {
                let got = g.value(feats.angles)[[i, j]] as f64;
                assert!(
                    (got - reference.joint_angles[j]).abs() < 1e-4,
                    "sample {i} angle {j}: {got} vs {}",
                    reference.joint_angles[j]
                );
            }
        }
    }

    #[test]
    fn graph_kp_loss_matches_reference() {
        let t = topo();
        let bank = make_posture_bank(2, 3, &t).unwrap();
        let gt: Vec<Pose> = bank.iter().map(|s| s.pose.clone()).collect();
        let shifted: Vec<Pose> = gt.iter().map(|p| p.translated(0.02, -0.01)).collect();
        let (gt_coords, gt_vis) = coordinate_targets(&gt).unwrap();
        let (gen_coords, _) = coordinate_targets(&shifted).unwrap();

        let mut g = Graph::inference();
        let cv = g.constant(gen_coords.into_dyn());
        let loss = keypoint_loss_graph(&mut g, cv, &gt_coords, &gt_vis).unwrap();
        let got = g.value(loss).first().copied().unwrap() as f64;

        let mut expected = 0.0;
        for (gen, gtp) in shifted.iter().zip(&gt) {
            let mask = visibility_mask(gen, gtp).unwrap();
            expected += keypoint_loss(gen, gtp, &mask).unwrap().value;
        }
        expected /= gt.len() as f64;
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
    }

    #[test]
    fn graph_consistency_loss_matches_reference() {
        let t = topo();
        let bank = make_posture_bank(4, 5, &t).unwrap();
        let gen_poses: Vec<Pose> = bank.iter().take(2).map(|s| s.pose.clone()).collect();
        let gt_poses: Vec<Pose> = bank.iter().skip(2).map(|s| s.pose.clone()).collect();
        let (gen_coords, _) = coordinate_targets(&gen_poses).unwrap();
        let (tr, ta, rv, av) = feature_targets(&gt_poses, &t).unwrap();

        let mut g = Graph::inference();
        let cv = g.constant(gen_coords.into_dyn());
        let feats = pose_features_graph(&mut g, cv, &t).unwrap();
        let loss = pose_consistency_graph(&mut g, &feats, &tr, &ta, &rv, &av).unwrap();
        let got = g.value(loss).first().copied().unwrap() as f64;

        let mut expected = 0.0;
        for (gen, gtp) in gen_poses.iter().zip(&gt_poses) {
            expected += crate::skeleton::pose_consistency_between(gen, gtp, &t).unwrap();
        }
        expected /= gen_poses.len() as f64;
        let rel = (got - expected).abs() / expected.max(1e-9);
        assert!(rel < 1e-4, "{got} vs {expected}");
    }

    #[test]
    fn end_to_end_pose_loss_gradient_flows_to_pixels() {
        // render a posture, perturb the target features, check that the
        // pose-consistency loss produces a nonzero, finite image gradient
        let t = topo();
        let bank = make_posture_bank(2, 7, &t).unwrap();
        let pal = joint_palette(t.joint_count());
        let img = render_posture(&bank[0].pose, &t, &pal, 32).unwrap();
        let mut batch = Array4::<f32>::zeros((1, 3, 32, 32));
        batch.index_axis_mut(Axis(0), 0).assign(&img);

        let (tr, ta, rv, av) = feature_targets(&[bank[1].pose.clone()], &t).unwrap();
        let mut g = Graph::new();
        let iv = g.param(batch.into_dyn());
        let ext = soft_argmax_graph(&mut g, iv, &pal, &ExtractConfig::default()).unwrap();
        let feats = pose_features_graph(&mut g, ext.coords, &t).unwrap();
        let loss = pose_consistency_graph(&mut g, &feats, &tr, &ta, &rv, &av).unwrap();
        assert!(g.value(loss).first().copied().unwrap() > 0.1);
        let mut store = g.backward(loss).unwrap();
        let grad = store.take(iv).unwrap();
        let norm: f32 = grad.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm.is_finite() && norm > 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn empty_mask_keypoint_loss_is_zero_constant() {
        let coords = Array3::<f32>::zeros((1, 3, 2));
        let mask = Array2::<bool>::from_elem((1, 3), false);
        let mut g = Graph::new();
        let cv = g.param(coords.clone().into_dyn());
        let loss = keypoint_loss_graph(&mut g, cv, &coords, &mask).unwrap();
        assert_eq!(g.value(loss).first().copied().unwrap(), 0.0);
    }
}
