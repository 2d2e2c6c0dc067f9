//! Conditional GAN: fully connected generator and discriminator with
//! learned label embeddings and non-saturating logistic losses.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Embedding, Linear, ParamStore};

/// Architecture settings for the pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CganConfig {
    /// Latent dimension Z.
    pub z_dim: usize,
    /// Label embedding width.
    pub label_dim: usize,
    /// Generator hidden widths; the discriminator mirrors them.
    pub hidden: Vec<usize>,
    pub image_size: u32,
    pub num_classes: usize,
    pub leaky_slope: f32,
}

impl Default for CganConfig {
    fn default() -> Self {
        Self {
            z_dim: 128,
            label_dim: 64,
            hidden: vec![256, 512, 1024],
            image_size: 128,
            num_classes: 20,
            leaky_slope: 0.2,
        }
    }
}

impl CganConfig {
    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 || self.label_dim == 0 || self.num_classes == 0 {
            return Err(Error::Argument("cgan dims and class count must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Argument("cgan needs at least one hidden layer".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Argument(format!("image_size {} too small", self.image_size)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Argument(format!("leaky_slope {} out of range", self.leaky_slope)));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        let s = self.image_size as usize;
        3 * s * s
    }
}

/// Generator and discriminator over one parameter store; generator
/// parameters live under `gen.`, discriminator under `disc.`.
#[derive(Debug, Clone)]
pub struct GanPair {
    pub cfg: CganConfig,
    gen_emb: Embedding,
    gen_fcs: Vec<Linear>,
    gen_out: Linear,
    disc_emb: Embedding,
    disc_fcs: Vec<Linear>,
    disc_out: Linear,
}

impl GanPair {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha20Rng, cfg: CganConfig) -> Result<Self> {
        cfg.validate()?;
        let gen_emb = Embedding::init(store, rng, "gen.emb", cfg.num_classes, cfg.label_dim)?;
        let mut gen_fcs = Vec::new();
        let mut width = cfg.z_dim + cfg.label_dim;
        for (i, &h) in cfg.hidden.iter().enumerate() {
            gen_fcs.push(Linear::init(store, rng, &format!("gen.fc{i}"), width, h)?);
            width = h;
        }
        let gen_out = Linear::init(store, rng, "gen.out", width, cfg.pixels())?;

        let disc_emb = Embedding::init(store, rng, "disc.emb", cfg.num_classes, cfg.label_dim)?;
        let mut disc_fcs = Vec::new();
        let mut width = cfg.pixels() + cfg.label_dim;
        for (i, &h) in cfg.hidden.iter().rev().enumerate() {
            disc_fcs.push(Linear::init(store, rng, &format!("disc.fc{i}"), width, h)?);
            width = h;
        }
        let disc_out = Linear::init(store, rng, "disc.out", width, 1)?;
        Ok(Self { cfg, gen_emb, gen_fcs, gen_out, disc_emb, disc_fcs, disc_out })
    }

    /// Rebuilds the handles over a store that already holds the parameters
    /// (after loading a checkpoint).
    pub fn attach(store: &ParamStore, cfg: CganConfig) -> Result<Self> {
        cfg.validate()?;
        let gen_emb = attach_embedding(store, "gen.emb", cfg.num_classes, cfg.label_dim)?;
        let mut gen_fcs = Vec::new();
        for i in 0..cfg.hidden.len() {
            gen_fcs.push(Linear::attach(store, &format!("gen.fc{i}"))?);
        }
        let gen_out = Linear::attach(store, "gen.out")?;
        let disc_emb = attach_embedding(store, "disc.emb", cfg.num_classes, cfg.label_dim)?;
        let mut disc_fcs = Vec::new();
        for i in 0..cfg.hidden.len() {
            disc_fcs.push(Linear::attach(store, &format!("disc.fc{i}"))?);
        }
        let disc_out = Linear::attach(store, "disc.out")?;
        Ok(Self { cfg, gen_emb, gen_fcs, gen_out, disc_emb, disc_fcs, disc_out })
    }

    /// Draws a latent batch `[B, Z]` from the standard normal.
    pub fn sample_latents(&self, rng: &mut ChaCha20Rng, batch: usize) -> Array2<f32> {
        let mut z = Array2::<f32>::zeros((batch, self.cfg.z_dim));
        let normal = rand_distr::StandardNormal;
        z.mapv_inplace(|_| rand_distr::Distribution::sample(&normal, rng));
        z
    }

    /// Generator forward: `[B, Z]` latents and labels to images
    /// `[B, 3, H, W]` in `[-1, 1]`.
    pub fn generate(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        z: &Array2<f32>,
        labels: &[usize],
    ) -> Result<Var> {
        if z.nrows() != labels.len() || z.ncols() != self.cfg.z_dim {
            return Err(Error::Argument(format!(
                "latents {:?} vs {} labels (Z={})",
                z.shape(),
                labels.len(),
                self.cfg.z_dim
            )));
        }
        self.check_labels(labels)?;
        let zv = g.constant(z.clone().into_dyn());
        let emb = self.gen_emb.forward(g, bind, labels)?;
        let mut h = g.concat2(zv, emb, 1)?;
        for fc in &self.gen_fcs {
            h = fc.forward(g, bind, h)?;
            h = g.leaky_relu(h, self.cfg.leaky_slope);
        }
        let flat = self.gen_out.forward(g, bind, h)?;
        let bounded = g.tanh(flat);
        let s = self.cfg.image_size as usize;
        g.reshape(bounded, &[labels.len(), 3, s, s])
    }

    /// Discriminator forward on an in-graph image batch; returns `[B]`
    /// logits.
    pub fn discriminate(
        &self,
        g: &mut Graph,
        bind: &mut Binder,
        images: Var,
        labels: &[usize],
    ) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        let s = self.cfg.image_size as usize;
        if shape != [labels.len(), 3, s, s] {
            return Err(Error::Argument(format!(
                "discriminator input {shape:?}, expected [{}, 3, {s}, {s}]",
                labels.len()
            )));
        }
        self.check_labels(labels)?;
        let flat = g.reshape(images, &[labels.len(), self.cfg.pixels()])?;
        let emb = self.disc_emb.forward(g, bind, labels)?;
        let mut h = g.concat2(flat, emb, 1)?;
        for fc in &self.disc_fcs {
            h = fc.forward(g, bind, h)?;
            h = g.leaky_relu(h, self.cfg.leaky_slope);
        }
        let logit = self.disc_out.forward(g, bind, h)?;
        g.reshape(logit, &[labels.len()])
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.cfg.num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} out of range for C={}",
                self.cfg.num_classes
            )));
        }
        Ok(())
    }
}

/// Attaches an embedding and checks it against the expected shape.
fn attach_embedding(store: &ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Embedding> {
    let e = Embedding::attach(store, name)?;
    if e.vocab != vocab || e.dim != dim {
        return Err(Error::Load(format!(
            "embedding {name:?} is {}x{}, config expects {vocab}x{dim}",
            e.vocab, e.dim
        )));
    }
    Ok(e)
}

/// Discriminator objective from logits:
/// `mean softplus(-real) + mean softplus(fake)`.
pub fn logistic_d_loss(g: &mut Graph, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let nr = g.neg(real_logits);
    let lr = g.softplus(nr);
    let lr = g.mean_all(lr);
    let lf = g.softplus(fake_logits);
    let lf = g.mean_all(lf);
    g.weighted_sum(&[(lr, 1.0), (lf, 1.0)])
}

/// Non-saturating generator objective from logits:
/// `mean softplus(-fake)`.
pub fn logistic_g_loss(g: &mut Graph, fake_logits: Var) -> Result<Var> {
    let nf = g.neg(fake_logits);
    let lf = g.softplus(nf);
    Ok(g.mean_all(lf))
}

/// Evaluates both adversarial losses on fixed batches, without touching
/// any gradients. Returns `(l_g, l_d)`.
pub fn gan_adversarial_losses(
    pair: &GanPair,
    store: &ParamStore,
    real: &Array4<f32>,
    fake: &Array4<f32>,
    labels: &[usize],
) -> Result<(f32, f32)> {
    let mut g = Graph::inference();
    let mut bind = Binder::new(store);
    let rv = g.constant(real.clone().into_dyn());
    let fv = g.constant(fake.clone().into_dyn());
    let rl = pair.discriminate(&mut g, &mut bind, rv, labels)?;
    let fl = pair.discriminate(&mut g, &mut bind, fv, labels)?;
    let ld = logistic_d_loss(&mut g, rl, fl)?;
    let lg = logistic_g_loss(&mut g, fl)?;
    let ld = g.value(ld).first().copied().ok_or_else(|| Error::Numeric("empty loss".into()))?;
    let lg = g.value(lg).first().copied().ok_or_else(|| Error::Numeric("empty loss".into()))?;
    Ok((lg, ld))
}
