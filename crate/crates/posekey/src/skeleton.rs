//! Skeleton geometry and the two pose-supervision losses.
//!
//! Everything here is a pure function over `f64` data: keypoint
//! normalization, relative pose features (bone-length ratios and unsigned
//! joint angles), the keypoint alignment loss, and the pose consistency
//! loss. The differentiable `f32` counterparts used inside training graphs
//! live in [`crate::extract`]; these functions are the reference the
//! gradient checks compare against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lengths below this (in the pose's own units) count as degenerate.
pub const EPS_LEN: f64 = 1e-6;

/// Named joints, bone edges, and angle triples of a 2D skeleton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    joint_names: Vec<String>,
    bones: Vec<(usize, usize)>,
    angle_triples: Vec<(usize, usize, usize)>,
    torso_edge: usize,
}

impl SkeletonTopology {
    /// Validates all structural invariants: indices in range, no duplicate
    /// edges, bone graph connected and acyclic, torso edge present.
    pub fn new(
        joint_names: Vec<String>,
        bones: Vec<(usize, usize)>,
        angle_triples: Vec<(usize, usize, usize)>,
        torso_edge: usize,
    ) -> Result<Self> {
        let k = joint_names.len();
        if k < 2 {
            return Err(Error::Argument("topology needs at least 2 joints".into()));
        }
        for &(a, b) in &bones {
            if a >= k || b >= k {
                return Err(Error::Argument(format!("bone ({a},{b}) out of range for K={k}")));
            }
            if a == b {
                return Err(Error::Argument(format!("self-loop bone at joint {a}")));
            }
        }
        for (i, &(a, b)) in bones.iter().enumerate() {
            for &(c, d) in &bones[i + 1..] {
                if (a, b) == (c, d) || (a, b) == (d, c) {
                    return Err(Error::Argument(format!("duplicate bone ({a},{b})")));
                }
            }
        }
        for &(a, p, b) in &angle_triples {
            if a >= k || p >= k || b >= k {
                return Err(Error::Argument(format!("angle triple ({a},{p},{b}) out of range")));
            }
            if a == p || b == p {
                return Err(Error::Argument(format!("angle triple ({a},{p},{b}) reuses its pivot")));
            }
        }
        if torso_edge >= bones.len() {
            return Err(Error::Argument(format!(
                "torso_edge {torso_edge} out of range for {} bones",
                bones.len()
            )));
        }
        // Connected + acyclic over K nodes means exactly K-1 edges reaching everyone.
        if bones.len() != k - 1 {
            return Err(Error::Argument(format!(
                "bone graph must be a tree: K={k} joints need {} bones, got {}",
                k - 1,
                bones.len()
            )));
        }
        let mut seen = vec![false; k];
        let mut stack = vec![bones[torso_edge].0];
        seen[bones[torso_edge].0] = true;
        while let Some(j) = stack.pop() {
            for &(a, b) in &bones {
                let other = if a == j {
                    b
                } else if b == j {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Argument("bone graph is not connected".into()));
        }
        Ok(Self { joint_names, bones, angle_triples, torso_edge })
    }

    /// The 15-joint skeleton used by the synthetic dataset: pelvis-rooted
    /// torso/head chain plus two arms and two legs, with angle triples at
    /// shoulders, elbows, hips, and knees.
    pub fn human15() -> Self {
        let names = [
            "pelvis", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
            "r_elbow", "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
        ];
        let bones = vec![
            (0, 1), // torso: pelvis -> neck
            (1, 2),
            (1, 3),
            (3, 4),
            (4, 5),
            (1, 6),
            (6, 7),
            (7, 8),
            (0, 9),
            (9, 10),
            (10, 11),
            (0, 12),
            (12, 13),
            (13, 14),
        ];
        let triples = vec![
            (1, 3, 4),   // left shoulder
            (1, 6, 7),   // right shoulder
            (3, 4, 5),   // left elbow
            (6, 7, 8),   // right elbow
            (0, 9, 10),  // left hip
            (0, 12, 13), // right hip
            (9, 10, 11), // left knee
            (12, 13, 14),
        ];
        Self::new(names.iter().map(|s| s.to_string()).collect(), bones, triples, 0)
            .expect("built-in topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn bones(&self) -> &[(usize, usize)] {
        &self.bones
    }

    pub fn angle_triples(&self) -> &[(usize, usize, usize)] {
        &self.angle_triples
    }

    pub fn torso_edge(&self) -> usize {
        self.torso_edge
    }

    pub fn torso_bone(&self) -> (usize, usize) {
        self.bones[self.torso_edge]
    }

    /// Total relative-feature count: one ratio per bone plus one angle per triple.
    pub fn feature_count(&self) -> usize {
        self.bones.len() + self.angle_triples.len()
    }
}

/// Coordinate space of a [`Pose`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordSpace {
    /// Raw pixel coordinates of some image.
    Pixel,
    /// Componentwise divided by image dimensions; visible joints in [0,1]^2.
    Normalized,
    /// Offsets from the torso root divided by torso length (selectable
    /// normalization mode; not confined to the unit square).
    TorsoUnits,
}

/// K 2D keypoints with a per-joint visibility mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    coords: Vec<[f64; 2]>,
    visibility: Vec<bool>,
    space: CoordSpace,
}

impl Pose {
    pub fn new(coords: Vec<[f64; 2]>, visibility: Vec<bool>, space: CoordSpace) -> Result<Self> {
        if coords.len() != visibility.len() {
            return Err(Error::Argument(format!(
                "{} coords vs {} visibility flags",
                coords.len(),
                visibility.len()
            )));
        }
        if coords.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Argument("pose coordinates must be finite".into()));
        }
        Ok(Self { coords, visibility, space })
    }

    /// All-visible pose.
    pub fn visible(coords: Vec<[f64; 2]>, space: CoordSpace) -> Self {
        let n = coords.len();
        Self::new(coords, vec![true; n], space).expect("finite coords")
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn space(&self) -> CoordSpace {
        self.space
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        let coords = self.coords.iter().map(|&[x, y]| [x + dx, y + dy]).collect();
        Self { coords, visibility: self.visibility.clone(), space: self.space }
    }

    /// Rotation by `theta` radians about the centroid of the visible joints.
    pub fn rotated(&self, theta: f64) -> Self {
        let vis: Vec<&[f64; 2]> = self
            .coords
            .iter()
            .zip(&self.visibility)
            .filter(|(_, &v)| v)
            .map(|(c, _)| c)
            .collect();
        let n = vis.len().max(1) as f64;
        let cx = vis.iter().map(|c| c[0]).sum::<f64>() / n;
        let cy = vis.iter().map(|c| c[1]).sum::<f64>() / n;
        let (s, c) = theta.sin_cos();
        let coords = self
            .coords
            .iter()
            .map(|&[x, y]| {
                let (dx, dy) = (x - cx, y - cy);
                [cx + c * dx - s * dy, cy + s * dx + c * dy]
            })
            .collect();
        Self { coords, visibility: self.visibility.clone(), space: self.space }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let coords = self.coords.iter().map(|&[x, y]| [x * factor, y * factor]).collect();
        Self { coords, visibility: self.visibility.clone(), space: self.space }
    }
}

/// One pose annotation line of a `poses.jsonl` file:
/// `{"image": <relative path>, "keypoints": [[x, y, v], ...]}` with x/y in
/// pixels and v in {0,1}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub image: String,
    pub keypoints: Vec<[f64; 3]>,
}

impl PoseRecord {
    pub fn from_pose(image: impl Into<String>, pose: &Pose) -> Self {
        let keypoints = pose
            .coords()
            .iter()
            .zip(pose.visibility())
            .map(|(&[x, y], &v)| [x, y, if v { 1.0 } else { 0.0 }])
            .collect();
        Self { image: image.into(), keypoints }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        let coords = self.keypoints.iter().map(|&[x, y, _]| [x, y]).collect();
        let visibility = self.keypoints.iter().map(|&[_, _, v]| v > 0.5).collect();
        Pose::new(coords, visibility, CoordSpace::Pixel)
    }
}

/// Weights of the two auxiliary pose losses in a composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kp: f64,
    pub lambda_pose: f64,
}

impl LossWeights {
    pub fn new(lambda_kp: f64, lambda_pose: f64) -> Result<Self> {
        if !(lambda_kp.is_finite() && lambda_kp >= 0.0) || !(lambda_pose.is_finite() && lambda_pose >= 0.0)
        {
            return Err(Error::Argument("loss weights must be finite and >= 0".into()));
        }
        Ok(Self { lambda_kp, lambda_pose })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_kp: 1.0, lambda_pose: 1.0 }
    }
}

/// Divides pixel coordinates componentwise by the image dimensions.
///
/// Visible keypoints that land outside [0,1]^2 are clamped; the second
/// return value counts how many were. Invertible by
/// [`denormalize_keypoints`] whenever nothing was clamped.
pub fn normalize_keypoints(pose: &Pose, image_dims: (u32, u32)) -> Result<(Pose, usize)> {
    let (w, h) = image_dims;
    if w == 0 || h == 0 {
        return Err(Error::Argument(format!("image dims must be positive, got {w}x{h}")));
    }
    if pose.space() != CoordSpace::Pixel {
        return Err(Error::Argument("normalize_keypoints expects a pixel-space pose".into()));
    }
    let mut warnings = 0usize;
    let coords = pose
        .coords()
        .iter()
        .zip(pose.visibility())
        .map(|(&[x, y], &vis)| {
            let mut nx = x / w as f64;
            let mut ny = y / h as f64;
            if vis && !(0.0..=1.0).contains(&nx) | !(0.0..=1.0).contains(&ny) {
                warnings += 1;
            }
            if vis {
                nx = nx.clamp(0.0, 1.0);
                ny = ny.clamp(0.0, 1.0);
            }
            [nx, ny]
        })
        .collect();
    let pose = Pose::new(coords, pose.visibility().to_vec(), CoordSpace::Normalized)?;
    Ok((pose, warnings))
}

/// Companion of [`normalize_keypoints`]: multiplies back to pixel space.
pub fn denormalize_keypoints(pose: &Pose, image_dims: (u32, u32)) -> Result<Pose> {
    let (w, h) = image_dims;
    if w == 0 || h == 0 {
        return Err(Error::Argument(format!("image dims must be positive, got {w}x{h}")));
    }
    if pose.space() != CoordSpace::Normalized {
        return Err(Error::Argument("denormalize_keypoints expects a normalized pose".into()));
    }
    let coords = pose.coords().iter().map(|&[x, y]| [x * w as f64, y * h as f64]).collect();
    Pose::new(coords, pose.visibility().to_vec(), CoordSpace::Pixel)
}

/// Torso-length normalization mode: offsets from the torso-bone root joint
/// divided by torso length.
pub fn normalize_keypoints_torso(pose: &Pose, topo: &SkeletonTopology) -> Result<Pose> {
    check_topology(pose, topo)?;
    if pose.space() != CoordSpace::Pixel {
        return Err(Error::Argument("normalize_keypoints_torso expects a pixel-space pose".into()));
    }
    let (root, tip) = topo.torso_bone();
    let r = pose.coords()[root];
    let t = pose.coords()[tip];
    let len = dist(r, t);
    if len < EPS_LEN {
        return Err(Error::DegeneratePose(format!("torso length {len:.3e} below {EPS_LEN:.0e}")));
    }
    let coords = pose
        .coords()
        .iter()
        .map(|&[x, y]| [(x - r[0]) / len, (y - r[1]) / len])
        .collect();
    Pose::new(coords, pose.visibility().to_vec(), CoordSpace::TorsoUnits)
}

/// Result of [`keypoint_loss`]; `defined` is false when the joint mask was
/// empty (the value is then 0 by convention).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointLoss {
    pub value: f64,
    pub defined: bool,
}

/// Mask of joints visible in both poses.
pub fn visibility_mask(a: &Pose, b: &Pose) -> Result<Vec<bool>> {
    if a.joint_count() != b.joint_count() {
        return Err(Error::TopologyMismatch(format!(
            "{} vs {} joints",
            a.joint_count(),
            b.joint_count()
        )));
    }
    Ok(a.visibility().iter().zip(b.visibility()).map(|(&x, &y)| x && y).collect())
}

/// Keypoint alignment loss: mean over masked joints of the squared
/// Euclidean distance between normalized coordinates.
pub fn keypoint_loss(gen: &Pose, gt: &Pose, mask: &[bool]) -> Result<KeypointLoss> {
    if gen.joint_count() != gt.joint_count() || mask.len() != gen.joint_count() {
        return Err(Error::TopologyMismatch(format!(
            "gen {} / gt {} joints with {} mask entries",
            gen.joint_count(),
            gt.joint_count(),
            mask.len()
        )));
    }
    if gen.space() != gt.space() {
        return Err(Error::TopologyMismatch("poses are in different coordinate spaces".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((a, b), &m) in gen.coords().iter().zip(gt.coords()).zip(mask) {
        if m {
            let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
            sum += dx * dx + dy * dy;
            n += 1;
        }
    }
    if n == 0 {
        Ok(KeypointLoss { value: 0.0, defined: false })
    } else {
        Ok(KeypointLoss { value: sum / n as f64, defined: true })
    }
}

/// Mean Euclidean distance in pixels between the joints visible in both
/// poses, assuming normalized coordinates scaled by `image_size`. `None`
/// when the spaces differ or no joint is visible in both.
pub fn mean_joint_distance_px(a: &Pose, b: &Pose, image_size: u32) -> Option<f64> {
    if a.space() != b.space() {
        return None;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..a.joint_count().min(b.joint_count()) {
        if a.visibility()[j] && b.visibility()[j] {
            let dx = a.coords()[j][0] - b.coords()[j][0];
            let dy = a.coords()[j][1] - b.coords()[j][1];
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some(sum / n as f64 * image_size as f64)
}

/// Bone-length ratios and unsigned joint angles, with per-feature validity.
///
/// A ratio is valid when the bone's joints and the torso joints are all
/// visible; an angle is valid when all three joints are visible and both
/// arms are longer than [`EPS_LEN`]. Invalid features carry value 0 (ratios
/// report 0, degenerate angles report 0 rad).
#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseFeatures {
    pub bone_length_ratios: Vec<f64>,
    pub joint_angles: Vec<f64>,
    pub ratio_valid: Vec<bool>,
    pub angle_valid: Vec<bool>,
}

impl RelativePoseFeatures {
    pub fn feature_count(&self) -> usize {
        self.bone_length_ratios.len() + self.joint_angles.len()
    }
}

fn check_topology(pose: &Pose, topo: &SkeletonTopology) -> Result<()> {
    if pose.joint_count() != topo.joint_count() {
        return Err(Error::TopologyMismatch(format!(
            "pose has {} joints, topology expects {}",
            pose.joint_count(),
            topo.joint_count()
        )));
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Unsigned angle at `pivot` between the arms toward `a` and `b`, in [0, pi].
fn unsigned_angle(a: [f64; 2], pivot: [f64; 2], b: [f64; 2]) -> Option<f64> {
    let u = [a[0] - pivot[0], a[1] - pivot[1]];
    let v = [b[0] - pivot[0], b[1] - pivot[1]];
    let nu = (u[0] * u[0] + u[1] * u[1]).sqrt();
    let nv = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if nu < EPS_LEN || nv < EPS_LEN {
        return None;
    }
    let cos = ((u[0] * v[0] + u[1] * v[1]) / (nu * nv)).clamp(-1.0, 1.0);
    Some(cos.acos())
}

/// Computes the relative pose features of Eq. 3: one length ratio per bone
/// (against the torso bone) and one unsigned angle per angle triple.
pub fn relative_pose_features(pose: &Pose, topo: &SkeletonTopology) -> Result<RelativePoseFeatures> {
    check_topology(pose, topo)?;
    let coords = pose.coords();
    let vis = pose.visibility();
    let (root, tip) = topo.torso_bone();
    let torso_visible = vis[root] && vis[tip];
    let torso_len = dist(coords[root], coords[tip]);
    if torso_visible && torso_len < EPS_LEN {
        return Err(Error::DegeneratePose(format!(
            "torso length {torso_len:.3e} below {EPS_LEN:.0e}"
        )));
    }

    let mut ratios = Vec::with_capacity(topo.bones().len());
    let mut ratio_valid = Vec::with_capacity(topo.bones().len());
    for &(a, b) in topo.bones() {
        let valid = torso_visible && vis[a] && vis[b];
        if valid {
            ratios.push(dist(coords[a], coords[b]) / torso_len);
        } else {
            ratios.push(0.0);
        }
        ratio_valid.push(valid);
    }

    let mut angles = Vec::with_capacity(topo.angle_triples().len());
    let mut angle_valid = Vec::with_capacity(topo.angle_triples().len());
    for &(a, p, b) in topo.angle_triples() {
        if vis[a] && vis[p] && vis[b] {
            match unsigned_angle(coords[a], coords[p], coords[b]) {
                Some(theta) => {
                    angles.push(theta);
                    angle_valid.push(true);
                }
                None => {
                    // degenerate arms: angle 0 with a cleared validity flag
                    angles.push(0.0);
                    angle_valid.push(false);
                }
            }
        } else {
            angles.push(0.0);
            angle_valid.push(false);
        }
    }

    Ok(RelativePoseFeatures { bone_length_ratios: ratios, joint_angles: angles, ratio_valid, angle_valid })
}

/// Pose consistency loss: sum of squared differences over the features that
/// are valid on both sides.
pub fn pose_consistency_loss(
    gen: &RelativePoseFeatures,
    gt: &RelativePoseFeatures,
) -> Result<f64> {
    if gen.bone_length_ratios.len() != gt.bone_length_ratios.len()
        || gen.joint_angles.len() != gt.joint_angles.len()
    {
        return Err(Error::TopologyMismatch(format!(
            "feature layouts differ: {}+{} vs {}+{}",
            gen.bone_length_ratios.len(),
            gen.joint_angles.len(),
            gt.bone_length_ratios.len(),
            gt.joint_angles.len()
        )));
    }
    let mut sum = 0.0;
    for i in 0..gen.bone_length_ratios.len() {
        if gen.ratio_valid[i] && gt.ratio_valid[i] {
            let d = gen.bone_length_ratios[i] - gt.bone_length_ratios[i];
            sum += d * d;
        }
    }
    for i in 0..gen.joint_angles.len() {
        if gen.angle_valid[i] && gt.angle_valid[i] {
            let d = gen.joint_angles[i] - gt.joint_angles[i];
            sum += d * d;
        }
    }
    Ok(sum)
}

/// Convenience: features of both poses, then [`pose_consistency_loss`].
pub fn pose_consistency_between(pose_a: &Pose, pose_b: &Pose, topo: &SkeletonTopology) -> Result<f64> {
    let fa = relative_pose_features(pose_a, topo)?;
    let fb = relative_pose_features(pose_b, topo)?;
    pose_consistency_loss(&fa, &fb)
}
