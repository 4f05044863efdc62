//! PatchGAN-style discriminator over one-channel edge maps.
//!
//! Four 4×4 conv blocks (64,128,256,512 channels; strides 2,2,2,1; spectral
//! norm; LeakyReLU 0.2) and a final spectrally normalized 4×4 conv to one
//! channel followed by a sigmoid. Every output cell scores one patch.

use eadnet_tensor::{Element, Tape, Tensor, Var};

use super::{Bound, ConvSpec, Init, ModelParams};
use crate::error::{Error, Result};

pub const DISCRIMINATOR_TAG: &str = "discriminator";
pub const DISC_LEAKY_SLOPE: f64 = 0.2;
/// Smallest accepted input side.
pub const DISC_MIN_SIDE: usize = 64;

/// `(out_channels, stride)` per conv; the last entry is the scoring conv.
const LAYERS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 2), (512, 1), (1, 1)];

#[derive(Debug, Clone)]
pub struct Discriminator<T: Element = f32> {
    params: ModelParams<T>,
}

fn layer_name(i: usize) -> String {
    format!("conv{}", i + 1)
}

impl<T: Element> Discriminator<T> {
    pub fn build(seed: u64) -> Result<Self> {
        let mut p = ModelParams::new(DISCRIMINATOR_TAG);
        let mut in_ch = 1;
        for (i, &(out, stride)) in LAYERS.iter().enumerate() {
            let spec = ConvSpec::new(layer_name(i), in_ch, out, 4, stride, 1).spectral_normed();
            p.add_conv(spec, Init::FanIn { gain: 1.0 }, seed)?;
            in_ch = out;
        }
        Ok(Self { params: p })
    }

    pub fn from_params(params: ModelParams<T>) -> Result<Self> {
        let mut net = Self::build(0)?;
        net.params.load_from(&params.named_tensors())?;
        Ok(net)
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

    pub fn layer_names(&self) -> Vec<String> {
        (0..LAYERS.len()).map(layer_name).collect()
    }

    /// One power iteration per layer; training calls this before every
    /// forward so the normalization tracks the changing weights.
    pub fn refresh_spectral(&mut self) -> Result<()> {
        self.params.refresh_spectral(1)
    }

    /// Patch probabilities `[N,1,h,w]` for an edge map `[N,1,H,W]`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, edge: Var) -> Result<Var> {
        match *tape.value(edge).shape() {
            [_, 1, h, w] if h >= DISC_MIN_SIDE && w >= DISC_MIN_SIDE => {}
            [_, 1, h, w] => {
                return Err(Error::config(format!(
                    "discriminator input {h}x{w} is smaller than {DISC_MIN_SIDE}x{DISC_MIN_SIDE}"
                )))
            }
            ref s => {
                return Err(Error::config(format!(
                    "discriminator expects [N,1,H,W], got {s:?}"
                )))
            }
        }
        let mut t = edge;
        for i in 0..LAYERS.len() {
            t = self.params.apply_conv(tape, bound, &layer_name(i), t)?;
            if i + 1 < LAYERS.len() {
                t = tape.leaky_relu(t, DISC_LEAKY_SLOPE);
            }
        }
        Ok(tape.sigmoid(t))
    }

    pub fn predict(&self, edge: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(edge.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}
