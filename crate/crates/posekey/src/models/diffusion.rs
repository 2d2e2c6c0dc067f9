//! DDPM forward process, noise schedule, ancestral sampler, and the
//! graph-side reconstruction helpers used by composite training losses.

use ndarray::{Array4, ArrayD};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::unet::Unet;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, ParamStore};

/// Default linear-schedule endpoints.
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Variance schedule with its cumulative products, kept in f64 so the
/// telescoping identities survive long products.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear beta schedule from `BETA_START` to `BETA_END` over `t_count`
    /// steps.
    pub fn linear(t_count: usize) -> Result<Self> {
        Self::linear_range(t_count, BETA_START, BETA_END)
    }

    pub fn linear_range(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count < 2 {
            return Err(Error::Argument(format!("schedule needs at least 2 steps, got {t_count}")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Argument(format!(
                "bad beta range [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..t_count)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (t_count - 1) as f64)
            .collect();
        Self::from_beta(beta)
    }

    /// Builds the derived products from a beta sequence and checks the
    /// schedule invariants.
    pub fn from_beta(beta: Vec<f64>) -> Result<Self> {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let s = Self { beta, alpha, alpha_bar };
        s.validate()?;
        Ok(s)
    }

    /// Checks every invariant a usable schedule must satisfy: betas in
    /// `(0, 1)`, consistent alphas, and strictly decreasing positive
    /// cumulative products.
    pub fn validate(&self) -> Result<()> {
        let t = self.beta.len();
        if t == 0 || self.alpha.len() != t || self.alpha_bar.len() != t {
            return Err(Error::Numeric("schedule arrays are empty or misaligned".into()));
        }
        let mut prev_bar = 1.0f64;
        for i in 0..t {
            let b = self.beta[i];
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Numeric(format!("beta[{i}] = {b} outside (0, 1)")));
            }
            if (self.alpha[i] - (1.0 - b)).abs() > 1e-12 {
                return Err(Error::Numeric(format!("alpha[{i}] inconsistent with beta")));
            }
            let bar = self.alpha_bar[i];
            if !(bar > 0.0 && bar < prev_bar) {
                return Err(Error::Numeric(format!(
                    "alpha_bar[{i}] = {bar} not strictly decreasing from {prev_bar}"
                )));
            }
            prev_bar = bar;
        }
        Ok(())
    }

    pub fn t_count(&self) -> usize {
        self.beta.len()
    }

    /// Shortened schedule over `num_steps` evenly spaced timesteps.
    /// Returns the new schedule and the map from its indices to original
    /// timesteps, so the denoiser still sees the timestep values it was
    /// trained on. The cumulative products of the result agree with the
    /// originals at the mapped positions.
    pub fn respace(&self, num_steps: usize) -> Result<(Self, Vec<usize>)> {
        let t = self.t_count();
        if num_steps == 0 || num_steps > t {
            return Err(Error::Argument(format!(
                "cannot respace {t} steps into {num_steps}"
            )));
        }
        let map: Vec<usize> = if num_steps == 1 {
            vec![t - 1]
        } else {
            (0..num_steps)
                .map(|i| ((t - 1) as f64 * i as f64 / (num_steps - 1) as f64).round() as usize)
                .collect()
        };
        let mut beta = Vec::with_capacity(num_steps);
        let mut prev_bar = 1.0f64;
        for &ti in &map {
            beta.push(1.0 - self.alpha_bar[ti] / prev_bar);
            prev_bar = self.alpha_bar[ti];
        }
        let sub = Self::from_beta(beta)?;
        Ok((sub, map))
    }
}

fn check_batch(shape: &[usize], ts: &[usize], t_count: usize) -> Result<()> {
    if shape.len() != 4 || shape[0] != ts.len() {
        return Err(Error::Argument(format!(
            "batch {shape:?} with {} timesteps",
            ts.len()
        )));
    }
    if let Some(&bad) = ts.iter().find(|&&t| t >= t_count) {
        return Err(Error::Argument(format!("timestep {bad} out of range 0..{t_count}")));
    }
    Ok(())
}

/// Produces `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with a
/// per-sample timestep.
pub fn forward_diffuse(
    sched: &DiffusionSchedule,
    x0: &Array4<f32>,
    eps: &Array4<f32>,
    ts: &[usize],
) -> Result<Array4<f32>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Argument(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    check_batch(x0.shape(), ts, sched.t_count())?;
    let mut out = x0.clone();
    for (b, &t) in ts.iter().enumerate() {
        let abar = sched.alpha_bar[t];
        let (ca, cb) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
        let mut slab = out.index_axis_mut(ndarray::Axis(0), b);
        slab.zip_mut_with(&eps.index_axis(ndarray::Axis(0), b), |x, &e| {
            *x = ca * *x + cb * e;
        });
    }
    Ok(out)
}

/// Inverts the forward process given a noise estimate and clamps the
/// result to the image range `[-1, 1]`.
pub fn predict_x0(
    sched: &DiffusionSchedule,
    xt: &Array4<f32>,
    eps_hat: &Array4<f32>,
    ts: &[usize],
) -> Result<Array4<f32>> {
    if xt.shape() != eps_hat.shape() {
        return Err(Error::Argument(format!(
            "xt {:?} vs eps_hat {:?}",
            xt.shape(),
            eps_hat.shape()
        )));
    }
    check_batch(xt.shape(), ts, sched.t_count())?;
    let mut out = xt.clone();
    for (b, &t) in ts.iter().enumerate() {
        let abar = sched.alpha_bar[t];
        let inv = (1.0 / abar.sqrt()) as f32;
        let cb = ((1.0 - abar).sqrt() / abar.sqrt()) as f32;
        let mut slab = out.index_axis_mut(ndarray::Axis(0), b);
        slab.zip_mut_with(&eps_hat.index_axis(ndarray::Axis(0), b), |x, &e| {
            *x = (inv * *x - cb * e).clamp(-1.0, 1.0);
        });
    }
    Ok(out)
}

/// Same inversion inside the graph, so pose losses on the reconstruction
/// can reach the denoiser weights. `xt` enters as data; gradients flow
/// through `eps_hat`.
pub fn predict_x0_graph(
    g: &mut Graph,
    sched: &DiffusionSchedule,
    xt: Var,
    eps_hat: Var,
    ts: &[usize],
) -> Result<Var> {
    let shape = g.shape(xt).to_vec();
    if g.shape(eps_hat) != shape.as_slice() {
        return Err(Error::Argument(format!(
            "xt {:?} vs eps_hat {:?}",
            shape,
            g.shape(eps_hat)
        )));
    }
    check_batch(&shape, ts, sched.t_count())?;
    let mut inv = ArrayD::<f32>::zeros(shape.clone());
    let mut cb = ArrayD::<f32>::zeros(shape.clone());
    for (b, &t) in ts.iter().enumerate() {
        let abar = sched.alpha_bar[t];
        inv.index_axis_mut(ndarray::Axis(0), b).fill((1.0 / abar.sqrt()) as f32);
        cb.index_axis_mut(ndarray::Axis(0), b)
            .fill(((1.0 - abar).sqrt() / abar.sqrt()) as f32);
    }
    let inv = g.constant(inv);
    let cb = g.constant(cb);
    let a = g.mul(inv, xt)?;
    let b = g.mul(cb, eps_hat)?;
    let x0 = g.sub(a, b)?;
    Ok(g.clamp(x0, -1.0, 1.0))
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_recon_loss(g: &mut Graph, eps_hat: Var, eps: Var) -> Result<Var> {
    let diff = g.sub(eps_hat, eps)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// Classifier-free guidance combination
/// `(1 + s) * eps_cond - s * eps_null`.
pub fn mix_guidance(cond: &Array4<f32>, null: &Array4<f32>, scale: f32) -> Array4<f32> {
    let mut out = cond * (1.0 + scale);
    out.zip_mut_with(null, |o, &n| *o -= scale * n);
    out
}

/// Sampler settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleOptions {
    /// Guidance strength; 0 disables the second (null-label) forward pass.
    pub guidance_scale: f32,
    /// Number of respaced sampling steps; `None` walks the full schedule.
    pub num_steps: Option<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { guidance_scale: 0.0, num_steps: None }
    }
}

fn randn(rng: &mut ChaCha20Rng) -> f32 {
    StandardNormal.sample(rng)
}

fn batch_eps(
    unet: &Unet,
    store: &ParamStore,
    x: &Array4<f32>,
    t: usize,
    labels: &[usize],
    scale: f32,
) -> Result<Array4<f32>> {
    let b = labels.len();
    let ts = vec![t; b];
    let run = |ys: &[usize]| -> Result<Array4<f32>> {
        let mut g = Graph::inference();
        let mut bind = Binder::new(store);
        let xv = g.constant(x.clone().into_dyn());
        let out = unet.forward(&mut g, &mut bind, xv, &ts, ys)?;
        g.value(out)
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::Numeric(format!("denoiser output shape: {e}")))
    };
    let cond = run(labels)?;
    if scale == 0.0 {
        return Ok(cond);
    }
    let null = run(&vec![unet.cfg.null_class(); b])?;
    Ok(mix_guidance(&cond, &null, scale))
}

/// Ancestral DDPM sampling, optionally respaced and guided. Returns a
/// batch of images in `[-1, 1]`, one per label. Fully deterministic given
/// the generator state.
pub fn ddpm_sample(
    unet: &Unet,
    store: &ParamStore,
    sched: &DiffusionSchedule,
    labels: &[usize],
    opts: &SampleOptions,
    rng: &mut ChaCha20Rng,
) -> Result<Array4<f32>> {
    if labels.is_empty() {
        return Err(Error::Argument("ddpm_sample needs at least one label".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= unet.cfg.num_classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for C={}",
            unet.cfg.num_classes
        )));
    }
    if opts.guidance_scale < 0.0 {
        return Err(Error::Argument(format!(
            "guidance scale {} must be nonnegative",
            opts.guidance_scale
        )));
    }
    let full = sched.t_count();
    let (sub, map) = match opts.num_steps {
        Some(n) if n < full => sched.respace(n)?,
        Some(n) if n == full => (sched.clone(), (0..full).collect()),
        Some(n) => {
            return Err(Error::Argument(format!(
                "cannot sample {n} steps from a {full}-step schedule"
            )))
        }
        None => (sched.clone(), (0..full).collect()),
    };

    let s = unet.cfg.image_size as usize;
    let b = labels.len();
    let mut x = Array4::<f32>::from_shape_fn((b, 3, s, s), |_| randn(rng));

    for i in (0..sub.t_count()).rev() {
        let eps = batch_eps(unet, store, &x, map[i], labels, opts.guidance_scale)?;
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { component: "ddpm_sample".into(), step: i as u64 });
        }
        let beta = sub.beta[i];
        let coef = (beta / (1.0 - sub.alpha_bar[i]).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / sub.alpha[i].sqrt()) as f32;
        ndarray::Zip::from(&mut x).and(&eps).for_each(|xv, &ev| {
            *xv = inv_sqrt_alpha * (*xv - coef * ev);
        });
        if i > 0 {
            let var = (1.0 - sub.alpha_bar[i - 1]) / (1.0 - sub.alpha_bar[i]) * beta;
            let sigma = var.sqrt() as f32;
            x.mapv_inplace(|v| v + sigma * randn(rng));
        }
    }
    x.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(x)
}
