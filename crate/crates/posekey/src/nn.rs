//! Parameter storage, layer definitions, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`gen.fc1.weight`). Each training step binds the needed parameters into
//! a fresh [`Graph`] through a [`Binder`], runs forward/backward, collects
//! named gradients, and hands them to [`Adam`]. Layers are thin structs
//! that know their parameter names and how to apply themselves to a graph.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{GradStore, Graph, Var};
use crate::error::{Error, Result};

/// Named parameter arrays with deterministic iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Argument(format!("parameter {name:?} already exists")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))
    }

    /// Replaces an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: ArrayD<f32>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name:?}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Argument(format!(
                "parameter {name:?}: shape {:?} cannot replace {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f32>)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|n| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Binds store parameters into a graph, deduplicating by name so a
/// parameter used twice shares one leaf (and one gradient slot).
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, bound: BTreeMap::new() }
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = g.param(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Pulls the gradients of every bound parameter out of a backward pass.
    /// Parameters the loss never touched are absent from the result.
    pub fn grads(&self, store: &mut GradStore) -> BTreeMap<String, ArrayD<f32>> {
        self.bound
            .iter()
            .filter_map(|(n, &v)| store.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

fn uniform_array(rng: &mut ChaCha20Rng, shape: &[usize], bound: f32) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

fn normal_array(rng: &mut ChaCha20Rng, shape: &[usize], std: f32) -> ArrayD<f32> {
    let dist = Normal::new(0.0f32, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

/// Fully connected layer, weight layout `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Kaiming-uniform initialization: `U(-1/sqrt(in), 1/sqrt(in))` for
    /// weight and bias.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f32).sqrt();
        store.insert(&format!("{name}.weight"), uniform_array(rng, &[in_dim, out_dim], bound))?;
        store.insert(&format!("{name}.bias"), uniform_array(rng, &[out_dim], bound))?;
        Ok(Self { name: name.to_string(), in_dim, out_dim })
    }

    /// Zero weight and bias; standard for residual-branch output layers.
    pub fn init_zero(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        store.insert(&format!("{name}.weight"), ArrayD::zeros(IxDyn(&[in_dim, out_dim])))?;
        store.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])))?;
        Ok(Self { name: name.to_string(), in_dim, out_dim })
    }

    /// Rebuilds the handle for parameters already present in the store.
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.get(&format!("{name}.weight"))?;
        if w.ndim() != 2 {
            return Err(Error::Argument(format!("{name}.weight is not 2D")));
        }
        Ok(Self { name: name.to_string(), in_dim: w.shape()[0], out_dim: w.shape()[1] })
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let w = bind.var(g, &format!("{}.weight", self.name))?;
        let b = bind.var(g, &format!("{}.bias", self.name))?;
        g.linear(x, w, b)
    }
}

/// 2D convolution layer with fixed stride and padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f32;
        let bound = 1.0 / fan_in.sqrt();
        store.insert(
            &format!("{name}.weight"),
            uniform_array(rng, &[out_ch, in_ch, kernel, kernel], bound),
        )?;
        store.insert(&format!("{name}.bias"), uniform_array(rng, &[out_ch], bound))?;
        Ok(Self { name: name.to_string(), in_ch, out_ch, kernel, stride, pad })
    }

    pub fn init_zero(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        store.insert(
            &format!("{name}.weight"),
            ArrayD::zeros(IxDyn(&[out_ch, in_ch, kernel, kernel])),
        )?;
        store.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])))?;
        Ok(Self { name: name.to_string(), in_ch, out_ch, kernel, stride, pad })
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let w = bind.var(g, &format!("{}.weight", self.name))?;
        let b = bind.var(g, &format!("{}.bias", self.name))?;
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f32 = 1e-5;

    pub fn init(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Argument(format!(
                "group norm {name:?}: {channels} channels not divisible into {groups} groups"
            )));
        }
        store.insert(&format!("{name}.gamma"), ArrayD::ones(IxDyn(&[channels])))?;
        store.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])))?;
        Ok(Self { name: name.to_string(), channels, groups })
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, x: Var) -> Result<Var> {
        let gamma = bind.var(g, &format!("{}.gamma", self.name))?;
        let beta = bind.var(g, &format!("{}.beta", self.name))?;
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}

/// Lookup table of learned vectors, one per integer id.
#[derive(Debug, Clone)]
pub struct Embedding {
    name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        vocab: usize,
        dim: usize,
    ) -> Result<Self> {
        store.insert(&format!("{name}.table"), normal_array(rng, &[vocab, dim], 1.0))?;
        Ok(Self { name: name.to_string(), vocab, dim })
    }

    /// Reads vocabulary size and width back from a stored table.
    pub fn attach(store: &ParamStore, name: &str) -> Result<Self> {
        let table = store.get(&format!("{name}.table"))?;
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::Load(format!(
                "embedding table {name:?} has shape {shape:?}, expected rank 2"
            )));
        }
        Ok(Self { name: name.to_string(), vocab: shape[0], dim: shape[1] })
    }

    pub fn forward(&self, g: &mut Graph, bind: &mut Binder, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::Argument(format!(
                "embedding {:?}: id {bad} out of range for vocab {}",
                self.name, self.vocab
            )));
        }
        let table = bind.var(g, &format!("{}.table", self.name))?;
        g.embed(table, ids)
    }
}

/// Adam optimizer state for one parameter.
#[derive(Debug, Clone)]
struct Moments {
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

/// Exported optimizer state for one parameter: name, first moment,
/// second moment.
pub type MomentEntry = (String, ArrayD<f32>, ArrayD<f32>);

/// Adam with bias correction. One instance per model; `t` is the shared
/// step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self { lr, beta1, beta2, eps, t: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update using the given named gradients. Parameters not
    /// present in `grads` keep their value and their moments.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, ArrayD<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let value = params.get(name)?;
            if grad.shape() != value.shape() {
                return Err(Error::Argument(format!(
                    "gradient for {name:?} has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    value.shape()
                )));
            }
            let entry = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: ArrayD::zeros(grad.raw_dim()),
                v: ArrayD::zeros(grad.raw_dim()),
            });
            entry.m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            entry.v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut new_value = value.clone();
            ndarray::Zip::from(&mut new_value)
                .and(&entry.m)
                .and(&entry.v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            params.set(name, new_value)?;
        }
        Ok(())
    }

    /// Serializable view of the internal state: step count plus per-name
    /// first and second moments.
    pub fn export_state(&self) -> (u64, Vec<MomentEntry>) {
        let moments = self
            .moments
            .iter()
            .map(|(n, mo)| (n.clone(), mo.m.clone(), mo.v.clone()))
            .collect();
        (self.t, moments)
    }

    pub fn import_state(&mut self, t: u64, moments: Vec<MomentEntry>) {
        self.t = t;
        self.moments = moments
            .into_iter()
            .map(|(n, m, v)| (n, Moments { m, v }))
            .collect();
    }
}
