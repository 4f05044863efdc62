//! Training objectives for both phases.
//!
//! Every loss is recorded on a [`Tape`] so it can be differentiated; inputs
//! that are pure targets are passed as plain tensors.

use std::fmt;
use std::str::FromStr;

use eadnet_tensor::{Element, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::models::{Bound, EdgeNet, EdgeNetVariant, FeatureExtractor};

/// Side-output weights of the phase-2 edge loss (side 1 dominates).
pub const DEFAULT_ALPHA: [f64; 5] = [0.7, 0.1, 0.1, 0.1, 0.1];
pub const DEFAULT_EPS: f64 = 1e-8;

/// Which image the phase-2 edge loss extracts its target edges from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EdgeTarget {
    /// Edges of the blurry network input (the objective as originally
    /// formulated).
    #[default]
    Blurry,
    /// Edges of the sharp ground truth.
    Sharp,
}

impl fmt::Display for EdgeTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blurry => "blurry",
            Self::Sharp => "sharp",
        })
    }
}

impl FromStr for EdgeTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurry" => Ok(Self::Blurry),
            "sharp" => Ok(Self::Sharp),
            _ => Err(Error::config(format!(
                "unknown edge target {s:?} (expected blurry or sharp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Phase-1 adversarial weight while the schedule keeps it on.
    pub lambda_adv: f64,
    pub lambda_pixel: f64,
    pub lambda_perceptual: f64,
    pub lambda_edge: f64,
    /// Weight of side output `s` is `alpha[s - 1]`.
    pub alpha: Vec<f64>,
    pub eps: f64,
    pub binarize_threshold: f64,
    pub edge_target: EdgeTarget,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_adv: 0.05,
            lambda_pixel: 1.0,
            lambda_perceptual: 0.05,
            lambda_edge: 0.1,
            alpha: DEFAULT_ALPHA.to_vec(),
            eps: DEFAULT_EPS,
            binarize_threshold: 0.5,
            edge_target: EdgeTarget::Blurry,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda_adv,
            self.lambda_pixel,
            self.lambda_perceptual,
            self.lambda_edge,
        ];
        if weights
            .iter()
            .chain(&self.alpha)
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if self.alpha.len() != 5 {
            return Err(Error::config(format!(
                "alpha needs 5 side weights, got {}",
                self.alpha.len()
            )));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::config("eps must lie in (0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(Error::config("binarize threshold must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-pixel coefficients `(pos, neg)` of the class-balanced cross-entropy.
///
/// For each sample, `β = |Y⁻| / |Y|`; positives are weighted by `β`,
/// negatives by `1 - β`. A sample whose target is all one class gets
/// unweighted coefficients (plain BCE).
pub fn cbce_weights<T: Element>(target: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let t = target.data();
    if t.iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::config(
            "class-balanced cross-entropy needs a binary target",
        ));
    }
    let per = target.len() / target.shape()[0];
    let mut pos = Vec::with_capacity(t.len());
    let mut neg = Vec::with_capacity(t.len());
    for sample in t.chunks(per) {
        let n_pos = sample.iter().filter(|&&v| v == T::one()).count();
        let (wp, wn) = if n_pos == 0 || n_pos == per {
            (1.0, 1.0)
        } else {
            let beta = (per - n_pos) as f64 / per as f64;
            (beta, 1.0 - beta)
        };
        for &v in sample {
            let is_pos = v == T::one();
            pos.push(T::from_f64_lossy(if is_pos { wp } else { 0.0 }));
            neg.push(T::from_f64_lossy(if is_pos { 0.0 } else { wn }));
        }
    }
    let shape = target.shape().to_vec();
    Ok((Tensor::new(shape.clone(), pos)?, Tensor::new(shape, neg)?))
}

/// Class-balanced cross-entropy of probabilities `pred` against a binary
/// `target`, normalized by the pixel count.
pub fn cbce<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    tape.value(pred).expect_same_shape(target, "cbce")?;
    let (pos, neg) = cbce_weights(target)?;
    Ok(tape.bce(pred, &pos, &neg, eps)?)
}

/// Unweighted sum of [`cbce`] over every side output and the fuse output.
pub fn edge_loss_phase1<T: Element>(
    tape: &mut Tape<T>,
    maps: &[Var],
    target: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    let (pos, neg) = cbce_weights(target)?;
    let mut total: Option<Var> = None;
    for &m in maps {
        tape.value(m).expect_same_shape(target, "edge loss")?;
        let l = tape.bce(m, &pos, &neg, eps)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::config("edge loss needs at least one prediction"))
}

/// Generator adversarial loss `mean(-ln D(G(x)))`.
pub fn adv_g_loss<T: Element>(tape: &mut Tape<T>, d_fake: Var, eps: f64) -> Result<Var> {
    let shape = tape.value(d_fake).shape().to_vec();
    Ok(tape.bce(
        d_fake,
        &Tensor::ones(shape.clone()),
        &Tensor::zeros(shape),
        eps,
    )?)
}

/// Discriminator loss `mean(-ln D(real)) + mean(-ln(1 - D(fake)))`.
pub fn adv_d_loss<T: Element>(
    tape: &mut Tape<T>,
    d_real: Var,
    d_fake: Var,
    eps: f64,
) -> Result<Var> {
    let rs = tape.value(d_real).shape().to_vec();
    let fs = tape.value(d_fake).shape().to_vec();
    let real = tape.bce(d_real, &Tensor::ones(rs.clone()), &Tensor::zeros(rs), eps)?;
    let fake = tape.bce(d_fake, &Tensor::zeros(fs.clone()), &Tensor::ones(fs), eps)?;
    Ok(tape.add(real, fake)?)
}

/// Mean squared error over all elements.
pub fn pixel_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(tape.mse(pred, target)?)
}

/// Squared feature difference summed over positions, divided by `W_j·H_j`,
/// and averaged over channels (and batch): the mean squared feature error.
pub fn perceptual_loss<T: Element>(
    tape: &mut Tape<T>,
    phi: &dyn FeatureExtractor<T>,
    pred: Var,
    target: Var,
) -> Result<Var> {
    tape.value(pred)
        .expect_same_shape(tape.value(target), "perceptual loss")?;
    let fp = phi.features(tape, pred)?;
    let ft = phi.features(tape, target)?;
    Ok(tape.mse(fp, ft)?)
}

/// Maps `[-1,1]` images to the `[0,1]` range EdgeNet expects.
pub fn to_unit_range<T: Element>(tape: &mut Tape<T>, img: Var) -> Var {
    tape.affine(img, 0.5, 0.5)
}

/// Side-output edge consistency loss `Σ α_s · cbce(side_s(pred), [side_s(target) ≥ τ])`.
///
/// Both images are in `[0,1]`. The target branch is evaluated without
/// gradient tracking; gradients reach `pred_img` through the frozen
/// `edgenet`. Side `s` is weighted by `alpha[s - 1]`, so a reduced network
/// only uses the weight of its own side.
pub fn edge_loss_phase2<T: Element>(
    tape: &mut Tape<T>,
    edgenet: &EdgeNet<T>,
    edge_params: &Bound,
    target_img: &Tensor<T>,
    pred_img: Var,
    alpha: &[f64],
    threshold: f64,
    eps: f64,
) -> Result<Var> {
    let stages: Vec<usize> = match edgenet.variant() {
        EdgeNetVariant::Full => (1..=5).collect(),
        EdgeNetVariant::Reduced(k) => vec![k],
    };
    if let Some(&s) = stages.iter().find(|&&s| s > alpha.len()) {
        return Err(Error::config(format!(
            "no alpha weight for side output {s}"
        )));
    }
    let (target_sides, _) = edgenet.predict(target_img)?;
    let pred_sides = edgenet.forward(tape, edge_params, pred_img)?.sides;
    let tau = T::from_f64_lossy(threshold);
    let mut total: Option<Var> = None;
    for ((&s, t), &p) in stages.iter().zip(&target_sides).zip(&pred_sides) {
        let binary = t.map(|v| if v >= tau { T::one() } else { T::zero() });
        let l = cbce(tape, p, &binary, eps)?;
        let l = tape.scale(l, alpha[s - 1]);
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one side"))
}

/// `edge + λ·disc`.
pub fn total_phase1<T: Element>(
    tape: &mut Tape<T>,
    edge: Var,
    disc: Var,
    lambda: f64,
) -> Result<Var> {
    let d = tape.scale(disc, lambda);
    Ok(tape.add(edge, d)?)
}

/// `λ1·pixel + λ2·perceptual + λ3·edge`.
pub fn total_phase2<T: Element>(
    tape: &mut Tape<T>,
    pixel: Var,
    perceptual: Var,
    edge: Var,
    lambdas: [f64; 3],
) -> Result<Var> {
    let a = tape.scale(pixel, lambdas[0]);
    let b = tape.scale(perceptual, lambdas[1]);
    let c = tape.scale(edge, lambdas[2]);
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}
