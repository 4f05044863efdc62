//! Network definitions. Every network stores its weights in a
//! [`ModelParams`]: an ordered, named list of tensors plus the convolution
//! layout that consumes them.

mod deblurnet;
mod discriminator;
mod edgenet;
mod features;

use std::collections::HashMap;

use eadnet_tensor::{Element, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CheckpointError, Error, Result};

pub use deblurnet::{DeblurNet, DeblurNetConfig, DEBLURNET_TAG, RESIDUAL_INIT_SCALE};
pub use discriminator::{Discriminator, DISCRIMINATOR_TAG, DISC_LEAKY_SLOPE, DISC_MIN_SIDE};
pub use edgenet::{EdgeNet, EdgeNetVariant, EdgeOutputs, FUSE_INIT, VGG_STAGES};
pub use features::{
    ConvFeatures, FeatureExtractor, IdentityFeatures, DEFAULT_FEATURE_SEED, FEATURE_WIDTHS,
};

/// Name suffix of persisted, non-trainable spectral-norm vectors.
pub const SPECTRAL_U_SUFFIX: &str = ".weight_u";

/// Power iterations run at construction so the persisted `u` starts near the
/// top singular vector.
pub const SPECTRAL_WARMUP_ITERS: usize = 50;

/// Layout of one convolution layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight_norm: bool,
    pub spectral_norm: bool,
}

impl ConvSpec {
    pub fn new(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            name: name.into(),
            out_channels,
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            weight_norm: false,
            spectral_norm: false,
        }
    }

    pub fn weight_normed(mut self) -> Self {
        self.weight_norm = true;
        self
    }

    pub fn spectral_normed(mut self) -> Self {
        self.spectral_norm = true;
        self
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Weight initialization for a freshly built layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±gain * sqrt(3 / fan_in)`; `gain = sqrt(2)` ahead of a ReLU.
    FanIn { gain: f64 },
    /// Every weight set to the same value.
    Constant(f64),
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Element = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Named, ordered parameter collection of one network.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Element = f32> {
    tag: String,
    convs: Vec<ConvSpec>,
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every entry of a [`ModelParams`], in entry order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Element> ModelParams<T> {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            convs: Vec::new(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn convs(&self) -> &[ConvSpec] {
        &self.convs
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn conv(&self, name: &str) -> Option<&ConvSpec> {
        self.convs.iter().find(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Sum of element counts of trainable tensors.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn push_entry(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))?;
        let cur = &self.entries[i].tensor;
        if cur.shape() != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                actual: tensor.shape().to_vec(),
            }
            .into());
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    pub fn set_at(&mut self, i: usize, tensor: Tensor<T>) {
        debug_assert_eq!(self.entries[i].tensor.shape(), tensor.shape());
        self.entries[i].tensor = tensor;
    }

    /// Appends a convolution layer and its freshly initialized parameters.
    /// The layer's random stream depends only on `seed` and the layer name,
    /// so variants sharing a layer name share its initial weights.
    pub fn add_conv(&mut self, spec: ConvSpec, init: Init, seed: u64) -> Result<()> {
        let rng = &mut layer_rng(seed, &spec.name);
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::FanIn { gain } => {
                let bound = gain * (3.0 / spec.fan_in() as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Constant(v) => vec![v; n],
        };
        let weight = Tensor::from_f64(shape, &data)?;
        let name = spec.name.clone();
        if spec.weight_norm {
            let cols = n / spec.out_channels;
            let norms: Vec<f64> = data
                .chunks(cols)
                .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            self.push_entry(format!("{name}.weight_v"), weight, true)?;
            self.push_entry(
                format!("{name}.weight_g"),
                Tensor::from_f64(vec![spec.out_channels], &norms)?,
                true,
            )?;
        } else if spec.spectral_norm {
            let u: Vec<f64> = (0..spec.out_channels)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let u = eadnet_tensor::power_iteration(&weight, &u, SPECTRAL_WARMUP_ITERS)?;
            self.push_entry(format!("{name}.weight"), weight, true)?;
            self.push_entry(
                format!("{name}{SPECTRAL_U_SUFFIX}"),
                Tensor::from_f64(vec![spec.out_channels], &u)?,
                false,
            )?;
        } else {
            self.push_entry(format!("{name}.weight"), weight, true)?;
        }
        self.push_entry(
            format!("{name}.bias"),
            Tensor::zeros(vec![spec.out_channels]),
            true,
        )?;
        self.convs.push(spec);
        Ok(())
    }

    /// Records every entry on `tape`; trainable entries track gradients
    /// only when `trainable` is set.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        self.bind_with(tape, trainable, &[])
    }

    /// Like [`Self::bind`] but substitutes existing tape variables for the
    /// named entries.
    pub fn bind_with(
        &self,
        tape: &mut Tape<T>,
        trainable: bool,
        overrides: &[(&str, Var)],
    ) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| match overrides.iter().find(|(n, _)| *n == e.name) {
                Some(&(_, v)) => v,
                None => tape.leaf(e.tensor.clone(), trainable && e.trainable),
            })
            .collect();
        Bound { vars }
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.position(name)
            .map(|i| bound.vars[i])
            .ok_or_else(|| CheckpointError::Missing(name.to_string()).into())
    }

    /// Applies the named convolution layer, including its weight
    /// reparameterization.
    pub fn apply_conv(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &str,
        x: Var,
    ) -> Result<Var> {
        let spec = self
            .conv(layer)
            .ok_or_else(|| Error::config(format!("{}: no layer named {layer}", self.tag)))?;
        let weight = if spec.weight_norm {
            let v = self.var(bound, &format!("{layer}.weight_v"))?;
            let g = self.var(bound, &format!("{layer}.weight_g"))?;
            tape.weight_norm(v, g)?
        } else if spec.spectral_norm {
            let w = self.var(bound, &format!("{layer}.weight"))?;
            let u = self
                .get(&format!("{layer}{SPECTRAL_U_SUFFIX}"))
                .ok_or_else(|| CheckpointError::Missing(format!("{layer}{SPECTRAL_U_SUFFIX}")))?;
            let u: Vec<f64> = u.data().iter().map(|v| v.as_f64()).collect();
            tape.spectral_normalize(w, &u)?
        } else {
            self.var(bound, &format!("{layer}.weight"))?
        };
        let bias = self.var(bound, &format!("{layer}.bias"))?;
        Ok(tape.conv2d(x, weight, Some(bias), spec.stride, spec.padding)?)
    }

    /// Effective (reparameterized) weight of a layer.
    pub fn effective_weight(&self, layer: &str) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let spec = self
            .conv(layer)
            .ok_or_else(|| Error::config(format!("{}: no layer named {layer}", self.tag)))?;
        let w = if spec.weight_norm {
            let v = self.var(&bound, &format!("{layer}.weight_v"))?;
            let g = self.var(&bound, &format!("{layer}.weight_g"))?;
            tape.weight_norm(v, g)?
        } else if spec.spectral_norm {
            let w = self.var(&bound, &format!("{layer}.weight"))?;
            let u = self
                .get(&format!("{layer}{SPECTRAL_U_SUFFIX}"))
                .expect("u buffer");
            let u: Vec<f64> = u.data().iter().map(|v| v.as_f64()).collect();
            tape.spectral_normalize(w, &u)?
        } else {
            self.var(&bound, &format!("{layer}.weight"))?
        };
        Ok(tape.value(w).clone())
    }

    /// One power iteration per spectrally normalized layer, updating the
    /// persisted `u` vectors.
    pub fn refresh_spectral(&mut self, iters: usize) -> Result<()> {
        let layers: Vec<String> = self
            .convs
            .iter()
            .filter(|c| c.spectral_norm)
            .map(|c| c.name.clone())
            .collect();
        for layer in layers {
            let w = self
                .get(&format!("{layer}.weight"))
                .expect("weight")
                .clone();
            let uname = format!("{layer}{SPECTRAL_U_SUFFIX}");
            let u: Vec<f64> = self
                .get(&uname)
                .expect("u buffer")
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect();
            let u = eadnet_tensor::power_iteration(&w, &u, iters)?;
            self.set(&uname, Tensor::from_f64(vec![u.len()], &u)?)?;
        }
        Ok(())
    }

    /// Copies every entry of `self` from `source` by name, failing on the
    /// first missing or differently shaped tensor. Extra entries in `source`
    /// are ignored, which is how a reduced network loads a full checkpoint.
    pub fn load_from(&mut self, source: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            source.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for e in &mut self.entries {
            let t = lookup
                .get(e.name.as_str())
                .ok_or_else(|| CheckpointError::Missing(e.name.clone()))?;
            if t.shape() != e.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: e.tensor.shape().to_vec(),
                    actual: t.shape().to_vec(),
                }
                .into());
            }
            e.tensor = (*t).clone();
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.clone()))
            .collect()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            tag: self.tag.clone(),
            convs: self.convs.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the layer name.
    let hash = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(crate::blur::derive_seed(seed, hash))
}
