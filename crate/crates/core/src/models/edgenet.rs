//! VGG-style edge network with HED-style side outputs.
//!
//! Five conv stages (2,2,3,3,3 convs of widths 64,128,256,512,512) with 2×2
//! max pooling between stages. Each stage feeds a 1×1 side conv producing a
//! one-channel logit map that is bilinearly resized to the input size. The
//! full network also fuses the five side logits with a 1×1 conv. Reduced
//! variants keep only stages `1..=k` and side `k`.

use std::fmt;
use std::str::FromStr;

use eadnet_tensor::{Element, Tape, Tensor, Var};

use super::{ConvSpec, Init, ModelParams, RELU_GAIN};
use crate::error::{Error, Result};

/// `(convs, width)` per VGG stage.
pub const VGG_STAGES: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

/// Initial value of every fuse weight (uniform average of the five sides).
pub const FUSE_INIT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeNetVariant {
    Full,
    /// Stages `1..=k` plus side output `k`, `k` in `{1, 3, 5}`.
    Reduced(usize),
}

impl EdgeNetVariant {
    pub fn stages(self) -> usize {
        match self {
            Self::Full => 5,
            Self::Reduced(k) => k,
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn divisor(self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn tag(self) -> String {
        match self {
            Self::Full => "edgenet-full".to_string(),
            Self::Reduced(k) => format!("edgenet-reduced{k}"),
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Self::Reduced(k) if ![1, 3, 5].contains(&k) => Err(Error::config(format!(
                "reduced EdgeNet supports side layers 1, 3 or 5, not {k}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EdgeNetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Reduced(k) => write!(f, "{k}"),
        }
    }
}

/// Parses the side-layer spelling used on the command line: `1`, `3`, `5`
/// or `full`.
impl FromStr for EdgeNetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s {
            "full" => Self::Full,
            _ => Self::Reduced(s.parse().map_err(|_| {
                Error::config(format!(
                    "unknown side layer {s:?} (expected 1, 3, 5 or full)"
                ))
            })?),
        };
        v.validate()?;
        Ok(v)
    }
}

/// Tape handles of one EdgeNet forward pass; all maps are probabilities.
#[derive(Debug, Clone)]
pub struct EdgeOutputs {
    /// Side outputs in stage order; a single entry for reduced variants.
    pub sides: Vec<Var>,
    pub fuse: Option<Var>,
}

impl EdgeOutputs {
    /// The map used as "the" edge prediction: fuse when present, otherwise
    /// the only side output.
    pub fn primary(&self) -> Var {
        self.fuse
            .unwrap_or_else(|| *self.sides.last().expect("at least one side"))
    }

    pub fn all(&self) -> Vec<Var> {
        self.sides.iter().copied().chain(self.fuse).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EdgeNet<T: Element = f32> {
    variant: EdgeNetVariant,
    params: ModelParams<T>,
}

fn conv_name(stage: usize, j: usize) -> String {
    format!("stage{stage}.conv{j}")
}

impl<T: Element> EdgeNet<T> {
    pub fn build(variant: EdgeNetVariant, seed: u64) -> Result<Self> {
        variant.validate()?;
        let mut params = ModelParams::new(variant.tag());
        let mut in_ch = 3;
        for (s, &(convs, width)) in VGG_STAGES.iter().enumerate().take(variant.stages()) {
            for j in 1..=convs {
                let spec = ConvSpec::new(conv_name(s + 1, j), in_ch, width, 3, 1, 1);
                params.add_conv(spec, Init::FanIn { gain: RELU_GAIN }, seed)?;
                in_ch = width;
            }
        }
        let sides: Vec<usize> = match variant {
            EdgeNetVariant::Full => (1..=5).collect(),
            EdgeNetVariant::Reduced(k) => vec![k],
        };
        for s in sides {
            let spec = ConvSpec::new(format!("side{s}"), VGG_STAGES[s - 1].1, 1, 1, 1, 0);
            params.add_conv(spec, Init::FanIn { gain: 1.0 }, seed)?;
        }
        if variant == EdgeNetVariant::Full {
            params.add_conv(
                ConvSpec::new("fuse", 5, 1, 1, 1, 0),
                Init::Constant(FUSE_INIT),
                seed,
            )?;
        }
        Ok(Self { variant, params })
    }

    /// Wraps parameters loaded elsewhere, checking that they match the
    /// variant's layout.
    pub fn from_params(variant: EdgeNetVariant, params: ModelParams<T>) -> Result<Self> {
        let mut net = Self::build(variant, 0)?;
        net.params.load_from(&params.named_tensors())?;
        Ok(net)
    }

    pub fn variant(&self) -> EdgeNetVariant {
        self.variant
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Loads this variant's tensors by name from a (possibly larger)
    /// checkpoint, e.g. a full-network checkpoint into a reduced variant.
    pub fn load_subset(&mut self, source: &[(String, Tensor<T>)]) -> Result<()> {
        self.params.load_from(source)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.variant.divisor();
        match *shape {
            [_, 3, h, w] if h % d == 0 && w % d == 0 => Ok(()),
            [_, 3, h, w] => Err(Error::config(format!(
                "EdgeNet {} needs height and width divisible by {d}, got {h}x{w}; pad the input first",
                self.variant.tag()
            ))),
            _ => Err(Error::config(format!("EdgeNet expects [N,3,H,W] input, got {shape:?}"))),
        }
    }

    /// Forward pass on the tape. `params` must come from binding
    /// [`Self::params`].
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &super::Bound,
        x: Var,
    ) -> Result<EdgeOutputs> {
        self.check_input(tape.value(x).shape())?;
        let [_, _, h, w] = tape.value(x).dims4("edgenet")?;
        let mut feat = x;
        let mut logits = Vec::new();
        for (s, &(convs, _)) in VGG_STAGES.iter().enumerate().take(self.variant.stages()) {
            let stage = s + 1;
            if stage > 1 {
                feat = tape.maxpool2(feat)?;
            }
            for j in 1..=convs {
                feat = self
                    .params
                    .apply_conv(tape, params, &conv_name(stage, j), feat)?;
                feat = tape.relu(feat);
            }
            let wants_side = match self.variant {
                EdgeNetVariant::Full => true,
                EdgeNetVariant::Reduced(k) => stage == k,
            };
            if wants_side {
                let mut logit =
                    self.params
                        .apply_conv(tape, params, &format!("side{stage}"), feat)?;
                if stage > 1 {
                    logit = tape.upsample_bilinear(logit, h, w)?;
                }
                logits.push(logit);
            }
        }
        let fuse = if self.variant == EdgeNetVariant::Full {
            let cat = tape.concat_channels(&logits)?;
            let f = self.params.apply_conv(tape, params, "fuse", cat)?;
            Some(tape.sigmoid(f))
        } else {
            None
        };
        let sides = logits.into_iter().map(|l| tape.sigmoid(l)).collect();
        Ok(EdgeOutputs { sides, fuse })
    }

    /// Inference without gradient tracking. Returns side maps and the fuse
    /// map (absent for reduced variants).
    pub fn predict(&self, img: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Option<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(img.clone());
        let out = self.forward(&mut tape, &bound, x)?;
        let sides = out.sides.iter().map(|&v| tape.value(v).clone()).collect();
        let fuse = out.fuse.map(|v| tape.value(v).clone());
        Ok((sides, fuse))
    }

    /// The primary prediction: fuse for the full network, the side output
    /// for reduced ones.
    pub fn predict_primary(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (mut sides, fuse) = self.predict(img)?;
        Ok(fuse.unwrap_or_else(|| sides.pop().expect("at least one side")))
    }
}
