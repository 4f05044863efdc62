//! Frozen feature extractors for the perceptual loss.

use eadnet_tensor::{Element, Tape, Tensor, Var};

use super::{ConvSpec, Init, ModelParams, RELU_GAIN};
use crate::error::{Error, Result};

/// A frozen map `φ_j` from images to feature maps. Implementations must not
/// create trainable tape leaves.
pub trait FeatureExtractor<T: Element> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

/// `φ(x) = x`; with it the perceptual loss reduces to the pixel loss.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityFeatures;

impl<T: Element> FeatureExtractor<T> for IdentityFeatures {
    fn features(&self, _tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(x)
    }
}

pub const FEATURES_TAG: &str = "features";
pub const FEATURE_WIDTHS: [usize; 3] = [16, 32, 64];
pub const DEFAULT_FEATURE_SEED: u64 = 0x5eed_f00d;

/// Small frozen conv stack (3×3, stride 2, ReLU) whose output after layer
/// `j` (1-based) is the feature map. Weights can be replaced through the
/// checkpoint format.
#[derive(Debug, Clone)]
pub struct ConvFeatures<T: Element = f32> {
    params: ModelParams<T>,
    layer: usize,
}

impl<T: Element> ConvFeatures<T> {
    pub fn build(layer: usize, seed: u64) -> Result<Self> {
        if !(1..=FEATURE_WIDTHS.len()).contains(&layer) {
            return Err(Error::config(format!(
                "perceptual layer must be in 1..={}, got {layer}",
                FEATURE_WIDTHS.len()
            )));
        }
        let mut p = ModelParams::new(FEATURES_TAG);
        let mut in_ch = 3;
        for (i, &w) in FEATURE_WIDTHS.iter().enumerate() {
            p.add_conv(
                ConvSpec::new(format!("conv{}", i + 1), in_ch, w, 3, 2, 1),
                Init::FanIn { gain: RELU_GAIN },
                seed,
            )?;
            in_ch = w;
        }
        Ok(Self { params: p, layer })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<T> {
        &mut self.params
    }

    /// Feature map of a plain tensor.
    pub fn extract(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let f = self.features(&mut tape, v)?;
        Ok(tape.value(f).clone())
    }
}

impl<T: Element> FeatureExtractor<T> for ConvFeatures<T> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let bound = self.params.bind(tape, false);
        let mut t = x;
        for i in 1..=self.layer {
            t = self
                .params
                .apply_conv(tape, &bound, &format!("conv{i}"), t)?;
            t = tape.relu(t);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_shapes() {
        let img = Tensor::<f32>::full(vec![1, 3, 16, 16], 0.1);
        for (j, (c, s)) in [(16, 8), (32, 4), (64, 2)].into_iter().enumerate() {
            let f = ConvFeatures::build(j + 1, 0)
                .unwrap()
                .extract(&img)
                .unwrap();
            assert_eq!(f.shape(), &[1, c, s, s]);
        }
        assert!(ConvFeatures::<f32>::build(0, 0).is_err());
        assert!(ConvFeatures::<f32>::build(4, 0).is_err());
    }

    #[test]
    fn gradient_reaches_input() {
        let fx = ConvFeatures::<f64>::build(1, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![1, 3, 8, 8], 0.2));
        let f = fx.features(&mut tape, x).unwrap();
        let loss = tape.sum(f);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().shape(), &[1, 3, 8, 8]);
    }
}
