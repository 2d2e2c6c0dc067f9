//! Class- and time-conditioned U-Net used as the denoiser.
//!
//! Four encoder stages with channel doubling, a bottleneck, and four
//! mirrored decoder stages with skip connections. Self-attention runs at
//! every position whose operating resolution is 16 or 8. Conditioning
//! enters each residual block as a per-channel bias computed from the sum
//! of a sinusoidal timestep embedding (through a two-layer MLP) and a
//! learned class embedding; one extra class id serves as the null label
//! for classifier-free guidance.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{norm_groups, sinusoidal_time_embedding_batch};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Embedding, GroupNorm, Linear, ParamStore};

/// Resolutions at which self-attention is inserted.
const ATTN_RES: [usize; 2] = [16, 8];
/// Number of encoder (and decoder) stages.
const STAGES: usize = 4;

/// Denoiser architecture settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnetConfig {
    /// Channel count of the first stage; stage `i` uses `base << i`.
    pub base_channels: usize,
    pub image_size: u32,
    pub num_classes: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { base_channels: 64, image_size: 128, num_classes: 20 }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "base_channels {} must be even and at least 4",
                self.base_channels
            )));
        }
        let s = self.image_size;
        if s < 32 || !s.is_power_of_two() {
            return Err(Error::Argument(format!(
                "image_size {s} must be a power of two no smaller than 32"
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Argument("num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of each encoder stage.
    pub fn channel_plan(&self) -> [usize; STAGES] {
        std::array::from_fn(|i| self.base_channels << i)
    }

    /// Width of the conditioning vector fed to every residual block.
    pub fn emb_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Class id reserved for unconditional (null) conditioning.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }
}

/// Residual block with conditioning injected between its two convolutions.
#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        emb_dim: usize,
    ) -> Result<Self> {
        let norm1 = GroupNorm::init(store, &format!("{prefix}.norm1"), in_ch, norm_groups(in_ch))?;
        let conv1 = Conv2d::init(store, rng, &format!("{prefix}.conv1"), in_ch, out_ch, 3, 1, 1)?;
        let emb = Linear::init(store, rng, &format!("{prefix}.emb"), emb_dim, out_ch)?;
        let norm2 =
            GroupNorm::init(store, &format!("{prefix}.norm2"), out_ch, norm_groups(out_ch))?;
        let conv2 = Conv2d::init_zero(store, &format!("{prefix}.conv2"), out_ch, out_ch, 3, 1, 1)?;
        let skip = if in_ch == out_ch {
            None
        } else {
            Some(Conv2d::init(store, rng, &format!("{prefix}.skip"), in_ch, out_ch, 1, 1, 0)?)
        };
        Ok(Self { norm1, conv1, emb, norm2, conv2, skip })
    }

    fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, bind, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, bind, h)?;
        let e = g.silu(emb);
        let e = self.emb.forward(g, bind, e)?;
        let h = g.add_channel_bias(h, e)?;
        let h = self.norm2.forward(g, bind, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, bind, h)?;
        let sk = match &self.skip {
            Some(conv) => conv.forward(g, bind, x)?,
            None => x,
        };
        g.add(h, sk)
    }
}

/// Spatial self-attention over all pixels at one resolution.
#[derive(Debug, Clone)]
struct AttentionBlock {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl AttentionBlock {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        let norm =
            GroupNorm::init(store, &format!("{prefix}.norm"), channels, norm_groups(channels))?;
        let qkv =
            Conv2d::init(store, rng, &format!("{prefix}.qkv"), channels, 3 * channels, 1, 1, 0)?;
        let proj = Conv2d::init_zero(store, &format!("{prefix}.proj"), channels, channels, 1, 1, 0)?;
        Ok(Self { norm, qkv, proj, channels })
    }

    fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let p = h * w;
        let hn = self.norm.forward(g, bind, x)?;
        let qkv = self.qkv.forward(g, bind, hn)?;
        let qkv = g.reshape(qkv, &[b, 3 * c, p])?;
        let idx: Vec<usize> = (0..c).collect();
        let q = g.index_select(qkv, 1, &idx)?;
        let idx: Vec<usize> = (c..2 * c).collect();
        let k = g.index_select(qkv, 1, &idx)?;
        let idx: Vec<usize> = (2 * c..3 * c).collect();
        let v = g.index_select(qkv, 1, &idx)?;
        let qt = g.swap_axes(q, 1, 2)?;
        let scores = g.bmm(qt, k)?;
        let scores = g.scale(scores, 1.0 / (self.channels as f32).sqrt());
        let attn = g.softmax_last(scores)?;
        let attn_t = g.swap_axes(attn, 1, 2)?;
        let out = g.bmm(v, attn_t)?;
        let out = g.reshape(out, &[b, c, h, w])?;
        let out = self.proj.forward(g, bind, out)?;
        g.add(x, out)
    }
}

#[derive(Debug, Clone)]
struct EncStage {
    res: Vec<ResBlock>,
    attn: Option<AttentionBlock>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct DecStage {
    upconv: Conv2d,
    res: Vec<ResBlock>,
    attn: Option<AttentionBlock>,
}

/// The full denoiser. Parameter names live under the `unet.` prefix.
#[derive(Debug, Clone)]
pub struct Unet {
    pub cfg: UnetConfig,
    stem: Conv2d,
    time_fc0: Linear,
    time_fc1: Linear,
    cls: Embedding,
    enc: Vec<EncStage>,
    mid_res: ResBlock,
    mid_attn: Option<AttentionBlock>,
    dec: Vec<DecStage>,
    head_norm: GroupNorm,
    head_conv: Conv2d,
}

impl Unet {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: UnetConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_channels;
        let plan = cfg.channel_plan();
        let emb_dim = cfg.emb_dim();

        let stem = Conv2d::init(store, rng, "unet.stem", 3, base, 3, 1, 1)?;
        let time_fc0 = Linear::init(store, rng, "unet.time.fc0", base, emb_dim)?;
        let time_fc1 = Linear::init(store, rng, "unet.time.fc1", emb_dim, emb_dim)?;
        let cls = Embedding::init(store, rng, "unet.cls", cfg.num_classes + 1, emb_dim)?;

        let mut enc = Vec::with_capacity(STAGES);
        let mut res = cfg.image_size as usize;
        let mut ch = base;
        for (i, &out_ch) in plan.iter().enumerate() {
            let mut blocks = Vec::with_capacity(2);
            for j in 0..2 {
                let in_ch = if j == 0 { ch } else { out_ch };
                blocks.push(ResBlock::init(
                    store,
                    rng,
                    &format!("unet.enc{i}.res{j}"),
                    in_ch,
                    out_ch,
                    emb_dim,
                )?);
            }
            let attn = if ATTN_RES.contains(&res) {
                Some(AttentionBlock::init(store, rng, &format!("unet.enc{i}.attn"), out_ch)?)
            } else {
                None
            };
            let down =
                Conv2d::init(store, rng, &format!("unet.enc{i}.down"), out_ch, out_ch, 3, 2, 1)?;
            enc.push(EncStage { res: blocks, attn, down });
            ch = out_ch;
            res /= 2;
        }

        let mid_res = ResBlock::init(store, rng, "unet.mid.res", ch, ch, emb_dim)?;
        let mid_attn = if ATTN_RES.contains(&res) {
            Some(AttentionBlock::init(store, rng, "unet.mid.attn", ch)?)
        } else {
            None
        };

        let mut dec = Vec::with_capacity(STAGES);
        for i in (0..STAGES).rev() {
            res *= 2;
            let stage_ch = plan[i];
            let upconv =
                Conv2d::init(store, rng, &format!("unet.dec{i}.up"), ch, stage_ch, 3, 1, 1)?;
            let mut blocks = Vec::with_capacity(2);
            for j in 0..2 {
                let in_ch = if j == 0 { 2 * stage_ch } else { stage_ch };
                blocks.push(ResBlock::init(
                    store,
                    rng,
                    &format!("unet.dec{i}.res{j}"),
                    in_ch,
                    stage_ch,
                    emb_dim,
                )?);
            }
            let attn = if ATTN_RES.contains(&res) {
                Some(AttentionBlock::init(store, rng, &format!("unet.dec{i}.attn"), stage_ch)?)
            } else {
                None
            };
            dec.push(DecStage { upconv, res: blocks, attn });
            ch = stage_ch;
        }

        let head_norm = GroupNorm::init(store, "unet.head.norm", base, norm_groups(base))?;
        let head_conv = Conv2d::init_zero(store, "unet.head.conv", base, 3, 3, 1, 1)?;

        Ok(Self {
            cfg,
            stem,
            time_fc0,
            time_fc1,
            cls,
            enc,
            mid_res,
            mid_attn,
            dec,
            head_norm,
            head_conv,
        })
    }

    /// Rebuilds the handles over a store that already holds the
    /// parameters (after loading a checkpoint). Layer handles carry
    /// names and shapes rather than values, so a scratch initialization
    /// recreates them; the real store is then checked against it name by
    /// name.
    pub fn attach(store: &ParamStore, cfg: UnetConfig) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let unet = Self::init(&mut scratch, &mut rng, cfg)?;
        for (name, template) in scratch.iter() {
            let actual = store
                .get(name)
                .map_err(|_| Error::Load(format!("checkpoint is missing parameter {name:?}")))?;
            if actual.shape() != template.shape() {
                return Err(Error::Load(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    actual.shape(),
                    template.shape()
                )));
            }
        }
        Ok(unet)
    }

    /// Conditioning vector `[B, 4*base]` from timesteps and class ids.
    /// Class id `num_classes` selects the null embedding.
    fn embedding(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        ts: &[usize],
        ys: &[usize],
    ) -> Result<Var> {
        let sin: Array2<f32> = sinusoidal_time_embedding_batch(ts, self.cfg.base_channels)?;
        let t = g.constant(sin.into_dyn());
        let t = self.time_fc0.forward(g, bind, t)?;
        let t = g.silu(t);
        let t = self.time_fc1.forward(g, bind, t)?;
        let y = self.cls.forward(g, bind, ys)?;
        g.add(t, y)
    }

    /// Predicts the noise component of `x` given per-sample timesteps and
    /// class labels. Shapes: `x` is `[B, 3, S, S]`, output matches.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        x: Var,
        ts: &[usize],
        ys: &[usize],
    ) -> Result<Var> {
        let s = self.cfg.image_size as usize;
        let shape = g.shape(x).to_vec();
        let b = ts.len();
        if shape != [b, 3, s, s] || ys.len() != b {
            return Err(Error::Argument(format!(
                "denoiser input {shape:?} with {} timesteps and {} labels, expected [{b}, 3, {s}, {s}]",
                ts.len(),
                ys.len()
            )));
        }
        if let Some(&bad) = ys.iter().find(|&&y| y > self.cfg.null_class()) {
            return Err(Error::Argument(format!(
                "class id {bad} out of range (null class is {})",
                self.cfg.null_class()
            )));
        }
        let emb = self.embedding(g, bind, ts, ys)?;

        let mut h = self.stem.forward(g, bind, x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for stage in &self.enc {
            for block in &stage.res {
                h = block.forward(g, bind, h, emb)?;
            }
            if let Some(attn) = &stage.attn {
                h = attn.forward(g, bind, h)?;
            }
            skips.push(h);
            h = stage.down.forward(g, bind, h)?;
        }

        h = self.mid_res.forward(g, bind, h, emb)?;
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(g, bind, h)?;
        }

        for stage in &self.dec {
            h = g.upsample2x(h)?;
            h = stage.upconv.forward(g, bind, h)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            h = g.concat2(h, skip, 1)?;
            for block in &stage.res {
                h = block.forward(g, bind, h, emb)?;
            }
            if let Some(attn) = &stage.attn {
                h = attn.forward(g, bind, h)?;
            }
        }

        h = self.head_norm.forward(g, bind, h)?;
        h = g.silu(h);
        self.head_conv.forward(g, bind, h)
    }
}
