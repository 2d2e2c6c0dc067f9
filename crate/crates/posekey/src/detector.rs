//! Adapter around an external pose-detector process, used for scoring
//! real photographs. The detector runs as a child process speaking a
//! line protocol: one request per line carrying an image path, one JSON
//! response per line in the `{"image": .., "keypoints": [[x,y,v],..]}`
//! shape. A declared index map translates the detector's joint order
//! into the internal topology; joints the detector does not provide
//! come back invisible. Detectors are for evaluation only; training
//! supervision always goes through the differentiable extractor.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{CoordSpace, Pose, PoseRecord};

/// Value in an index map marking an internal joint the detector cannot
/// supply.
pub const UNMAPPED: i64 = -1;

fn default_timeout_secs() -> f64 {
    30.0
}

fn default_vis_threshold() -> f64 {
    0.5
}

/// Declaration of an external detector: how to launch it, how many
/// joints it reports, and how its joint order maps onto ours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Program and arguments, exec-style (no shell interpretation).
    pub command: Vec<String>,
    /// Joint count of each detector response.
    pub joint_count: usize,
    /// For each internal joint, the detector index that supplies it, or
    /// [`UNMAPPED`] when the detector has no such joint.
    pub index_map: Vec<i64>,
    /// Seconds to wait for each response before giving up.
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// Detector confidence at or above which a joint counts as visible.
    #[serde(default = "default_vis_threshold")]
    pub vis_threshold: f64,
}

impl AdapterConfig {
    /// Identity adapter: a detector that already speaks the internal
    /// 15-joint order.
    pub fn identity(command: Vec<String>, joint_count: usize) -> Self {
        Self {
            command,
            joint_count,
            index_map: (0..joint_count as i64).collect(),
            timeout_secs: default_timeout_secs(),
            vis_threshold: default_vis_threshold(),
        }
    }

    /// Map for 33-landmark full-body detectors onto the internal
    /// 15-joint skeleton. The pelvis and neck have no landmark there
    /// and stay invisible; the head maps to the nose.
    pub fn mediapipe33(command: Vec<String>) -> Self {
        Self {
            command,
            joint_count: 33,
            index_map: vec![
                UNMAPPED, // pelvis
                UNMAPPED, // neck
                0,        // head <- nose
                11,       // l_shoulder
                13,       // l_elbow
                15,       // l_wrist
                12,       // r_shoulder
                14,       // r_elbow
                16,       // r_wrist
                23,       // l_hip
                25,       // l_knee
                27,       // l_ankle
                24,       // r_hip
                26,       // r_knee
                28,       // r_ankle
            ],
            timeout_secs: default_timeout_secs(),
            vis_threshold: default_vis_threshold(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(Error::Argument("adapter command is empty".into()));
        }
        if self.joint_count == 0 {
            return Err(Error::Argument("adapter joint_count must be positive".into()));
        }
        if self.index_map.is_empty() {
            return Err(Error::Argument("adapter index_map is empty".into()));
        }
        for (j, &d) in self.index_map.iter().enumerate() {
            if d != UNMAPPED && !(0..self.joint_count as i64).contains(&d) {
                return Err(Error::Argument(format!(
                    "index_map[{j}] = {d} is outside the detector's {} joints",
                    self.joint_count
                )));
            }
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(Error::Argument(format!(
                "adapter timeout {} must be a positive number of seconds",
                self.timeout_secs
            )));
        }
        if !self.vis_threshold.is_finite() {
            return Err(Error::Argument("adapter vis_threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

/// A running detector process. One handle owns one child; drop kills
/// it. Handles are single-owner; run several for parallel detection.
pub struct DetectorHandle {
    cfg: AdapterConfig,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    reader: Option<JoinHandle<()>>,
}

impl DetectorHandle {
    /// Launches the configured detector process.
    pub fn spawn(cfg: AdapterConfig) -> Result<Self> {
        cfg.validate()?;
        let mut child = Command::new(&cfg.command[0])
            .args(&cfg.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Detector(format!("could not launch {:?}: {e}", cfg.command[0])))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = child.stdout.take().expect("stdout was piped");
        let (tx, lines) = mpsc::channel();
        let reader = std::thread::spawn(move || {
            let buf = BufReader::new(stdout);
            for line in buf.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { cfg, child, stdin, lines, reader: Some(reader) })
    }

    /// Sends one image path and waits for the matching response.
    pub fn detect(&mut self, image_path: &Path) -> Result<Pose> {
        let request = format!("{}\n", image_path.display());
        self.stdin.write_all(request.as_bytes()).and_then(|_| self.stdin.flush()).map_err(
            |e| Error::Detector(format!("detector closed its input stream: {e}")),
        )?;
        let line = match self.lines.recv_timeout(self.cfg.timeout()) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(Error::Detector(format!("reading detector output: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                let _ = self.child.kill();
                return Err(Error::Detector(format!(
                    "no response within {:.1} s for {}",
                    self.cfg.timeout_secs,
                    image_path.display()
                )));
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Detector("detector process exited".into()));
            }
        };
        let record: PoseRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Detector(format!("malformed detector response ({e}): {line}")))?;
        if record.keypoints.len() != self.cfg.joint_count {
            return Err(Error::Detector(format!(
                "detector sent {} keypoints, declared {}: {line}",
                record.keypoints.len(),
                self.cfg.joint_count
            )));
        }
        let mut coords = Vec::with_capacity(self.cfg.index_map.len());
        let mut visibility = Vec::with_capacity(self.cfg.index_map.len());
        for &d in &self.cfg.index_map {
            if d == UNMAPPED {
                coords.push([0.0, 0.0]);
                visibility.push(false);
            } else {
                let [x, y, v] = record.keypoints[d as usize];
                coords.push([x, y]);
                visibility.push(v >= self.cfg.vis_threshold);
            }
        }
        Pose::new(coords, visibility, CoordSpace::Pixel)
            .map_err(|e| Error::Detector(format!("detector coordinates rejected: {e}")))
    }

    /// The configuration this handle was spawned with.
    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }
}

impl Drop for DetectorHandle {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
        // the reader thread is detached rather than joined: a detector
        // that spawned its own children can hold the stdout pipe open
        // past our kill, and the thread exits once the pipe closes
        self.reader.take();
    }
}

/// One-shot detection: spawn, query once, tear down.
pub fn external_detect(image_path: &Path, cfg: &AdapterConfig) -> Result<Pose> {
    let mut handle = DetectorHandle::spawn(cfg.clone())?;
    handle.detect(image_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_preset_maps_straight_through() {
        let cfg = AdapterConfig::identity(vec!["true".into()], 15);
        cfg.validate().unwrap();
        assert_eq!(cfg.index_map.len(), 15);
        assert!(cfg.index_map.iter().enumerate().all(|(i, &d)| d == i as i64));
    }

    #[test]
    fn mediapipe_preset_is_valid_and_partial() {
        let cfg = AdapterConfig::mediapipe33(vec!["true".into()]);
        cfg.validate().unwrap();
        assert_eq!(cfg.index_map.len(), 15);
        assert_eq!(cfg.index_map.iter().filter(|&&d| d == UNMAPPED).count(), 2);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = AdapterConfig::identity(vec![], 15);
        assert!(cfg.validate().is_err(), "empty command");
        cfg.command = vec!["true".into()];
        cfg.index_map[3] = 15;
        assert!(cfg.validate().is_err(), "index beyond joint_count");
        cfg.index_map[3] = 3;
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err(), "non-positive timeout");
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = AdapterConfig::mediapipe33(vec!["python3".into(), "det.py".into()]);
        let text = toml::to_string(&cfg).unwrap();
        let back: AdapterConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
