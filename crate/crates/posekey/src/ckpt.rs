//! Checkpoint container: a single file holding model weights, optimizer
//! moments, the noise schedule, a config snapshot, and the sampler RNG
//! state, with a trailing SHA-256 over the whole payload.
//!
//! Layout: 16-byte magic, little-endian u64 JSON length, JSON metadata
//! (names, shapes, scalars), little-endian u64 blob length, tensor data
//! as raw f32 little-endian in metadata order, 32-byte digest.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::diffusion::DiffusionSchedule;
use crate::nn::{Adam, MomentEntry, ParamStore};

const MAGIC: &[u8; 16] = b"posekey-ckpt-v1\n";
pub const FORMAT: &str = "posekey-ckpt-v1";

/// Everything needed to resume or sample from a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Which configuration produced this run (for example `cdiff_pose`).
    pub model_kind: String,
    pub step: u64,
    pub epoch: u64,
    /// Snapshot of the resolved run configuration.
    pub config: serde_json::Value,
    /// Present for diffusion models, absent for GANs.
    pub schedule: Option<DiffusionSchedule>,
    pub params: ParamStore,
    pub adam_t: u64,
    pub adam_moments: Vec<MomentEntry>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct MetaJson {
    format: String,
    model_kind: String,
    step: u64,
    epoch: u64,
    config: serde_json::Value,
    schedule: Option<DiffusionSchedule>,
    adam_t: u64,
    rng_seed: Vec<u8>,
    rng_word_pos: String,
    tensors: Vec<TensorMeta>,
}

impl Checkpoint {
    /// Records the optimizer into the checkpoint fields.
    pub fn set_optimizer(&mut self, adam: &Adam) {
        let (t, moments) = adam.export_state();
        self.adam_t = t;
        self.adam_moments = moments;
    }

    /// Loads the stored optimizer state into `adam`.
    pub fn apply_optimizer(&self, adam: &mut Adam) {
        adam.import_state(self.adam_t, self.adam_moments.clone());
    }

    /// Records the position of a sampling stream.
    pub fn capture_rng(&mut self, rng: &ChaCha20Rng) {
        self.rng_seed = rng.get_seed();
        self.rng_word_pos = rng.get_word_pos();
    }

    /// Rebuilds the recorded sampling stream at its exact position.
    pub fn restore_rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |name: &str, role: &str, value: &ArrayD<f32>, blob: &mut Vec<u8>| {
            tensors.push(TensorMeta {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                role: role.to_string(),
            });
            for &v in value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, value) in self.params.iter() {
            push(name, "param", value, &mut blob);
        }
        for (name, m, v) in &self.adam_moments {
            push(name, "adam_m", m, &mut blob);
            push(name, "adam_v", v, &mut blob);
        }

        let meta = MetaJson {
            format: FORMAT.to_string(),
            model_kind: self.model_kind.clone(),
            step: self.step,
            epoch: self.epoch,
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            adam_t: self.adam_t,
            rng_seed: self.rng_seed.to_vec(),
            rng_word_pos: self.rng_word_pos.to_string(),
            tensors,
        };
        let json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Load(format!("checkpoint metadata encode: {e}")))?;

        let mut out: Vec<u8> = Vec::with_capacity(MAGIC.len() + 16 + json.len() + blob.len() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);

        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let min = MAGIC.len() + 8 + 8 + 32;
        if data.len() < min {
            return Err(Error::Load(format!("{}: file too short", path.display())));
        }
        if &data[..MAGIC.len()] != MAGIC {
            return Err(Error::Load(format!("{}: not a {FORMAT} file", path.display())));
        }
        let (body, digest) = data.split_at(data.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Load(format!("{}: checksum mismatch", path.display())));
        }

        let mut off = MAGIC.len();
        let json_len = read_u64(body, &mut off)? as usize;
        if off + json_len + 8 > body.len() {
            return Err(Error::Load(format!("{}: metadata length out of bounds", path.display())));
        }
        let meta: MetaJson = serde_json::from_slice(&body[off..off + json_len])
            .map_err(|e| Error::Load(format!("{}: metadata: {e}", path.display())))?;
        off += json_len;
        if meta.format != FORMAT {
            return Err(Error::Load(format!(
                "{}: format {:?}, expected {FORMAT:?}",
                path.display(),
                meta.format
            )));
        }
        let blob_len = read_u64(body, &mut off)? as usize;
        if off + blob_len != body.len() {
            return Err(Error::Load(format!("{}: blob length out of bounds", path.display())));
        }
        let blob = &body[off..];

        let expected: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if expected * 4 != blob_len {
            return Err(Error::Load(format!(
                "{}: blob holds {} bytes, metadata wants {}",
                path.display(),
                blob_len,
                expected * 4
            )));
        }

        type PendingMoment = (String, Option<ArrayD<f32>>, Option<ArrayD<f32>>);
        let mut params = ParamStore::new();
        let mut moments: Vec<PendingMoment> = Vec::new();
        let mut pos = 0usize;
        for t in &meta.tensors {
            let count: usize = t.shape.iter().product();
            let mut values = Vec::with_capacity(count);
            for i in 0..count {
                let s = pos + 4 * i;
                values.push(f32::from_le_bytes([blob[s], blob[s + 1], blob[s + 2], blob[s + 3]]));
            }
            pos += 4 * count;
            let array = ArrayD::from_shape_vec(IxDyn(&t.shape), values)
                .map_err(|e| Error::Load(format!("tensor {:?}: {e}", t.name)))?;
            match t.role.as_str() {
                "param" => params.insert(&t.name, array)?,
                "adam_m" => moments.push((t.name.clone(), Some(array), None)),
                "adam_v" => {
                    match moments.last_mut() {
                        Some((name, _, v)) if *name == t.name && v.is_none() => *v = Some(array),
                        _ => {
                            return Err(Error::Load(format!(
                                "moment {:?} without matching first moment",
                                t.name
                            )))
                        }
                    };
                }
                other => return Err(Error::Load(format!("unknown tensor role {other:?}"))),
            }
        }
        let adam_moments = moments
            .into_iter()
            .map(|(name, m, v)| match (m, v) {
                (Some(m), Some(v)) => Ok((name, m, v)),
                _ => Err(Error::Load("incomplete optimizer moments".into())),
            })
            .collect::<Result<Vec<_>>>()?;

        if let Some(s) = &meta.schedule {
            s.validate()?;
        }
        let rng_seed: [u8; 32] = meta
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Load("rng seed must hold 32 bytes".into()))?;
        let rng_word_pos: u128 = meta
            .rng_word_pos
            .parse()
            .map_err(|e| Error::Load(format!("rng word position: {e}")))?;

        Ok(Self {
            model_kind: meta.model_kind,
            step: meta.step,
            epoch: meta.epoch,
            config: meta.config,
            schedule: meta.schedule,
            params,
            adam_t: meta.adam_t,
            adam_moments,
            rng_seed,
            rng_word_pos,
        })
    }
}

fn read_u64(data: &[u8], off: &mut usize) -> Result<u64> {
    let end = *off + 8;
    if end > data.len() {
        return Err(Error::Load("unexpected end of checkpoint".into()));
    }
    let bytes: [u8; 8] = data[*off..end].try_into().expect("slice of length 8");
    *off = end;
    Ok(u64::from_le_bytes(bytes))
}
