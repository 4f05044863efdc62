//! Two-phase training: phase 1 fits the edge network (optionally against a
//! patch discriminator), phase 2 fits the deblurring network guided by the
//! frozen edge network.

use std::fmt;
use std::path::{Path, PathBuf};

use eadnet_tensor::{Element, Gradients, Tape, Tensor, Var};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, EdgeTarget, LossConfig};
use crate::metrics::{MetricConfig, MetricReport};
use crate::models::{
    Bound, ConvFeatures, DeblurNet, Discriminator, EdgeNet, ModelParams, DEFAULT_FEATURE_SEED,
};
use crate::SamplePair;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    /// Where to write the parameters of every model when a loss turns
    /// non-finite; training aborts either way.
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr0: 5e-4,
            decay_every: 20,
            decay_factor: 0.1,
            batch: 4,
            crop: 256,
            seed: 0,
            snapshot_dir: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("Adam eps must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be at least 1"));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(16) {
            return Err(Error::config(format!(
                "crop must be a positive multiple of 16, got {}",
                self.crop
            )));
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^floor(epoch / decay_every)`, applied as repeated
/// multiplication so round values such as 5e-5 come out exactly.
pub fn lr_schedule(epoch: usize, cfg: &OptimConfig) -> f64 {
    (0..epoch / cfg.decay_every).fold(cfg.lr0, |lr, _| lr * cfg.decay_factor)
}

/// Adam moments for every entry of one [`ModelParams`].
#[derive(Debug, Clone)]
pub struct AdamState<T: Element = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable entry. `grads[i]`
/// belongs to entry `i`; `None` is a zero gradient.
pub fn adam_step<T: Element>(
    params: &mut ModelParams<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    let n = params.entries().len();
    if grads.len() != n || state.m.len() != n {
        return Err(Error::config(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            n,
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let entry = &params.entries()[i];
        if !entry.trainable {
            continue;
        }
        let shape = entry.tensor.shape();
        if let Some(g) = &grads[i] {
            if g.shape() != shape {
                return Err(Error::config(format!(
                    "adam: gradient for {} has shape {:?}, parameter has {:?}",
                    entry.name,
                    g.shape(),
                    shape
                )));
            }
        }
        let len = entry.tensor.len();
        let zeros;
        let g: &[T] = match &grads[i] {
            Some(g) => g.data(),
            None => {
                zeros = vec![T::from_f64_lossy(0.0); len];
                &zeros
            }
        };
        let zero = T::from_f64_lossy(0.0);
        let (mut theta, mut m, mut v) = (vec![zero; len], vec![zero; len], vec![zero; len]);
        let (p, m0, v0) = (entry.tensor.data(), state.m[i].data(), state.v[i].data());
        // Equal-length slices let the loop run without bounds checks.
        let (p, m0, v0, g) = (&p[..len], &m0[..len], &v0[..len], &g[..len]);
        let (theta_s, m_s, v_s) = (&mut theta[..len], &mut m[..len], &mut v[..len]);
        for j in 0..len {
            let gj = g[j].as_f64();
            let mj = b1 * m0[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v0[j].as_f64() + (1.0 - b2) * gj * gj;
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            theta_s[j] = T::from_f64_lossy(p[j].as_f64() - step);
            m_s[j] = T::from_f64_lossy(mj);
            v_s[j] = T::from_f64_lossy(vj);
        }
        let shape = shape.to_vec();
        state.m[i] = Tensor::new(shape.clone(), m)?;
        state.v[i] = Tensor::new(shape.clone(), v)?;
        params.set_at(i, Tensor::new(shape, theta)?);
    }
    Ok(())
}

/// Gradients of every entry of `bound`, in entry order.
pub fn collect_grads<T: Element>(grads: &Gradients<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound
        .vars()
        .iter()
        .map(|&v| grads.get(v).cloned())
        .collect()
}

/// A batch of aligned crops, stacked along dimension 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub clear: Tensor<f32>,
    pub blurry: Tensor<f32>,
    pub edge: Tensor<f32>,
}

fn crop_chw(img: &Tensor<f32>, y: usize, x: usize, size: usize) -> Tensor<f32> {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    debug_assert!(y + size <= h && x + size <= w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for k in 0..c {
        for r in y..y + size {
            let row = k * h * w + r * w;
            out.extend_from_slice(&d[row + x..row + x + size]);
        }
    }
    Tensor::new(vec![1, c, size, size], out).expect("crop shape")
}

/// Draws `batch` samples (with replacement) and one crop window per sample,
/// applied identically to its clear, blurry and edge images. Samples smaller
/// than the crop are skipped with a warning.
pub fn random_crop_batch(
    dataset: &[SamplePair],
    crop: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let eligible: Vec<&SamplePair> = dataset
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (h, w) = (p.clear.shape()[1], p.clear.shape()[2]);
            if h < crop || w < crop {
                warn!("skipping sample {i}: {h}x{w} is smaller than the {crop}x{crop} crop");
                None
            } else {
                Some(p)
            }
        })
        .collect();
    if eligible.is_empty() {
        return Err(Error::config(format!(
            "no sample is at least {crop}x{crop}"
        )));
    }
    let (mut clear, mut blurry, mut edge) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let p = eligible[rng.random_range(0..eligible.len())];
        let (h, w) = (p.clear.shape()[1], p.clear.shape()[2]);
        let y = rng.random_range(0..=h - crop);
        let x = rng.random_range(0..=w - crop);
        clear.push(crop_chw(&p.clear, y, x, crop));
        blurry.push(crop_chw(&p.blurry, y, x, crop));
        edge.push(crop_chw(&p.edge, y, x, crop));
    }
    Ok(Batch {
        clear: Tensor::stack(&clear, true)?,
        blurry: Tensor::stack(&blurry, true)?,
        edge: Tensor::stack(&edge, true)?,
    })
}

/// One optimizer step's losses.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossRecord {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, v)| v)
    }
}

/// `step\ttotal\tname=value...`
impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}", self.step, self.total)?;
        for (name, v) in &self.components {
            write!(f, "\t{name}={v:.6}")?;
        }
        Ok(())
    }
}

fn check_finite(step: usize, record: &LossRecord) -> Result<()> {
    if record.total.is_finite() && record.components.iter().all(|(_, v)| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: record.to_string(),
        })
    }
}

/// A finite loss can still carry non-finite gradients (a ReLU maps a NaN
/// activation to 0 on the way forward but not on the way back), so the
/// gradients are checked before any update.
fn check_grads<L>(
    step: usize,
    params: &ModelParams,
    stepped: (L, Vec<Option<Tensor<f32>>>),
) -> Result<(L, Vec<Option<Tensor<f32>>>)> {
    let bad = params.entries().iter().zip(&stepped.1).find(|(_, g)| {
        g.as_ref()
            .is_some_and(|g| g.data().iter().any(|v| !v.is_finite()))
    });
    match bad {
        Some((entry, _)) => Err(Error::NonFinite {
            step,
            detail: format!("non-finite gradient for {}", entry.name),
        }),
        None => Ok(stepped),
    }
}

/// Passes `result` through, except that a non-finite-loss error first saves
/// `models` (their state before the failing step) to `dir` and names the
/// files in the error.
fn snapshot_on_abort<R>(
    result: Result<R>,
    dir: Option<&Path>,
    models: &[&ModelParams],
) -> Result<R> {
    let Err(Error::NonFinite { step, mut detail }) = result else {
        return result;
    };
    if let Some(dir) = dir {
        for params in models {
            let path = dir.join(format!("nonfinite-step{step}-{}.ckpt", params.tag()));
            match crate::io::Checkpoint::from_params(params).save(&path) {
                Ok(()) => detail.push_str(&format!("; snapshot {}", path.display())),
                Err(e) => detail.push_str(&format!("; snapshot failed: {e}")),
            }
        }
    }
    Err(Error::NonFinite { step, detail })
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch).max(1)
}

/// Phase-1 settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    /// The adversarial weight is `loss.lambda_adv` before this epoch and 0
    /// from it on.
    pub adv_epochs: usize,
}

impl Default for EdgeTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            epochs: 50,
            adv_epochs: 50,
        }
    }
}

impl EdgeTrainConfig {
    /// Adversarial weight in effect during `epoch`.
    pub fn lambda(&self, epoch: usize) -> f64 {
        if epoch < self.adv_epochs {
            self.loss.lambda_adv
        } else {
            0.0
        }
    }
}

/// The EdgeNet half of a phase-1 generator step: the forward pass and edge
/// loss on a live tape, kept open so the discriminator can be updated on
/// the prediction before the adversarial term is attached.
pub struct GeneratorPass {
    tape: Tape<f32>,
    bound: Bound,
    primary: Var,
    edge: Var,
    edge_value: f64,
}

impl GeneratorPass {
    pub fn forward(edgenet: &EdgeNet, batch: &Batch, loss: &LossConfig) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = edgenet.params().bind(&mut tape, true);
        let x = tape.constant(batch.blurry.clone());
        let out = edgenet.forward(&mut tape, &bound, x)?;
        let edge = losses::edge_loss_phase1(&mut tape, &out.all(), &batch.edge, loss.eps)?;
        let edge_value = tape.value(edge).item()?.as_f64();
        Ok(Self {
            tape,
            bound,
            primary: out.primary(),
            edge,
            edge_value,
        })
    }

    /// The primary (fused) edge prediction.
    pub fn prediction(&self) -> &Tensor<f32> {
        self.tape.value(self.primary)
    }

    /// Completes the loss — with `with_adv` the discriminator term enters
    /// the graph scaled by `lambda` (possibly 0) — and returns the record
    /// and the EdgeNet gradients.
    pub fn finish(
        mut self,
        disc: &Discriminator,
        lambda: f64,
        with_adv: bool,
        loss: &LossConfig,
        step: usize,
    ) -> Result<(LossRecord, Vec<Option<Tensor<f32>>>)> {
        let tape = &mut self.tape;
        let mut components = vec![("edge", self.edge_value)];
        let total = if with_adv {
            let dbound = disc.params().bind(tape, false);
            let d_fake = disc.forward(tape, &dbound, self.primary)?;
            let adv = losses::adv_g_loss(tape, d_fake, loss.eps)?;
            components.push(("adv", tape.value(adv).item()?.as_f64()));
            losses::total_phase1(tape, self.edge, adv, lambda)?
        } else {
            self.edge
        };
        let record = LossRecord {
            step,
            total: tape.value(total).item()?.as_f64(),
            components,
        };
        check_finite(step, &record)?;
        let grads = tape.backward(total)?;
        Ok((record, collect_grads(&grads, &self.bound)))
    }
}

/// Generator-side phase-1 loss on one batch: [`GeneratorPass::forward`]
/// followed directly by [`GeneratorPass::finish`].
pub fn phase1_generator_step(
    edgenet: &EdgeNet,
    disc: &Discriminator,
    batch: &Batch,
    lambda: f64,
    with_adv: bool,
    loss: &LossConfig,
    step: usize,
) -> Result<(LossRecord, Vec<Option<Tensor<f32>>>)> {
    GeneratorPass::forward(edgenet, batch, loss)?.finish(disc, lambda, with_adv, loss, step)
}

/// Discriminator loss and gradients on one batch: real = ground-truth edges,
/// fake = the EdgeNet's primary prediction (treated as a constant).
pub fn phase1_discriminator_step(
    disc: &Discriminator,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    loss: &LossConfig,
) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut tape = Tape::new();
    let bound = disc.params().bind(&mut tape, true);
    let real = tape.constant(real.clone());
    let fake = tape.constant(fake.clone());
    let d_real = disc.forward(&mut tape, &bound, real)?;
    let d_fake = disc.forward(&mut tape, &bound, fake)?;
    let l = losses::adv_d_loss(&mut tape, d_real, d_fake, loss.eps)?;
    let value = tape.value(l).item()?.as_f64();
    let grads = tape.backward(l)?;
    Ok((value, collect_grads(&grads, &bound)))
}

#[derive(Debug, Clone)]
pub struct EdgeTrainOutcome {
    pub edgenet: EdgeNet,
    pub discriminator: Discriminator,
    pub history: Vec<LossRecord>,
}

/// Phase 1. Each step runs the EdgeNet forward once; (when the adversarial
/// weight is on) the discriminator is updated on that prediction, then the
/// EdgeNet is updated on `edge_loss + λ·adv_loss` against the updated
/// discriminator.
pub fn train_edgenet(
    data: &[SamplePair],
    mut edgenet: EdgeNet,
    mut disc: Discriminator,
    cfg: &EdgeTrainConfig,
) -> Result<EdgeTrainOutcome> {
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    edgenet.check_input(&[1, 3, cfg.optim.crop, cfg.optim.crop])?;
    if cfg.adv_epochs > 0
        && cfg.loss.lambda_adv > 0.0
        && cfg.optim.crop < crate::models::DISC_MIN_SIDE
    {
        return Err(Error::config(format!(
            "adversarial training needs crops of at least {}",
            crate::models::DISC_MIN_SIDE
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let snapshot_dir = cfg.optim.snapshot_dir.as_deref();
    let mut g_state = AdamState::new(edgenet.params());
    let mut d_state = AdamState::new(disc.params());
    let per_epoch = steps_per_epoch(data.len(), cfg.optim.batch);
    let mut history = Vec::with_capacity(cfg.epochs * per_epoch);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg.optim);
        let lambda = cfg.lambda(epoch);
        for _ in 0..per_epoch {
            let step = history.len();
            let batch = random_crop_batch(data, cfg.optim.crop, cfg.optim.batch, &mut rng)?;
            let pass = GeneratorPass::forward(&edgenet, &batch, &cfg.loss);
            let pass = snapshot_on_abort(pass, snapshot_dir, &[edgenet.params(), disc.params()])?;
            let mut d_loss = None;
            if lambda > 0.0 {
                disc.refresh_spectral()?;
                let stepped =
                    phase1_discriminator_step(&disc, &batch.edge, pass.prediction(), &cfg.loss)
                        .and_then(|(l, g)| {
                            if l.is_finite() {
                                Ok((l, g))
                            } else {
                                Err(Error::NonFinite {
                                    step,
                                    detail: format!("discriminator loss {l}"),
                                })
                            }
                        });
                let stepped = stepped.and_then(|s| check_grads(step, disc.params(), s));
                let (l, grads) =
                    snapshot_on_abort(stepped, snapshot_dir, &[edgenet.params(), disc.params()])?;
                adam_step(disc.params_mut(), &grads, &mut d_state, lr, &cfg.optim)?;
                disc.refresh_spectral()?;
                d_loss = Some(l);
            }
            let (mut record, grads) = snapshot_on_abort(
                pass.finish(&disc, lambda, lambda > 0.0, &cfg.loss, step)
                    .and_then(|s| check_grads(step, edgenet.params(), s)),
                snapshot_dir,
                &[edgenet.params(), disc.params()],
            )?;
            if let Some(l) = d_loss {
                record.components.push(("disc", l));
            }
            adam_step(edgenet.params_mut(), &grads, &mut g_state, lr, &cfg.optim)?;
            debug!("phase1 {record}");
            history.push(record);
        }
    }
    Ok(EdgeTrainOutcome {
        edgenet,
        discriminator: disc,
        history,
    })
}

/// Phase-2 settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DeblurTrainConfig {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub epochs: usize,
    /// Layer of the frozen perceptual feature stack.
    pub perceptual_layer: usize,
}

impl Default for DeblurTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            epochs: 50,
            perceptual_layer: 1,
        }
    }
}

/// Maps `[0,1]` RGB to the `[-1,1]` range the deblurring network works in.
pub fn to_signed(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`to_signed`], clamped to `[0,1]`.
pub fn to_unit(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Builds the `[N,4,H,W]` network input: signed RGB plus the edge map.
pub fn deblur_input(blurry: &Tensor<f32>, edge: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let rgb = tape.constant(to_signed(blurry));
    let e = tape.constant(edge.clone());
    let x = tape.concat_channels(&[rgb, e])?;
    Ok(tape.value(x).clone())
}

/// Networks used by phase 2 besides the one being trained.
pub struct Phase2Guides<'a> {
    /// Produces the edge channel of the network input.
    pub input_edgenet: &'a EdgeNet,
    /// Provides the side outputs of the edge loss.
    pub loss_edgenet: &'a EdgeNet,
    pub features: &'a ConvFeatures,
}

/// Phase-2 loss on one batch; returns the record and DeblurNet gradients.
pub fn phase2_step(
    deblur: &DeblurNet,
    guides: &Phase2Guides<'_>,
    batch: &Batch,
    loss: &LossConfig,
    step: usize,
) -> Result<(LossRecord, Vec<Option<Tensor<f32>>>)> {
    let edge_in = guides.input_edgenet.predict_primary(&batch.blurry)?;
    let input = deblur_input(&batch.blurry, &edge_in)?;
    let mut tape = Tape::new();
    let bound = deblur.params().bind(&mut tape, true);
    let x = tape.constant(input);
    let y = deblur.forward(&mut tape, &bound, x)?;
    let target = tape.constant(to_signed(&batch.clear));
    let pixel = losses::pixel_loss(&mut tape, y, target)?;
    let perceptual = if loss.lambda_perceptual > 0.0 {
        losses::perceptual_loss(&mut tape, guides.features, y, target)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let edge = if loss.lambda_edge > 0.0 {
        let ebound = guides.loss_edgenet.params().bind(&mut tape, false);
        let y01 = losses::to_unit_range(&mut tape, y);
        let target_img = match loss.edge_target {
            EdgeTarget::Blurry => &batch.blurry,
            EdgeTarget::Sharp => &batch.clear,
        };
        losses::edge_loss_phase2(
            &mut tape,
            guides.loss_edgenet,
            &ebound,
            target_img,
            y01,
            &loss.alpha,
            loss.binarize_threshold,
            loss.eps,
        )?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let total = losses::total_phase2(
        &mut tape,
        pixel,
        perceptual,
        edge,
        [loss.lambda_pixel, loss.lambda_perceptual, loss.lambda_edge],
    )?;
    let value = |v: Var| -> Result<f64> { Ok(tape.value(v).item()?.as_f64()) };
    let record = LossRecord {
        step,
        total: value(total)?,
        components: vec![
            ("pixel", value(pixel)?),
            ("perceptual", value(perceptual)?),
            ("edge", value(edge)?),
        ],
    };
    check_finite(step, &record)?;
    let grads = tape.backward(total)?;
    Ok((record, collect_grads(&grads, &bound)))
}

#[derive(Debug, Clone)]
pub struct DeblurTrainOutcome {
    pub deblurnet: DeblurNet,
    pub history: Vec<LossRecord>,
}

/// Phase 2: only the deblurring network is updated; both edge networks and
/// the feature stack stay frozen.
pub fn train_deblurnet(
    data: &[SamplePair],
    mut deblur: DeblurNet,
    input_edgenet: &EdgeNet,
    loss_edgenet: &EdgeNet,
    cfg: &DeblurTrainConfig,
) -> Result<DeblurTrainOutcome> {
    cfg.optim.validate()?;
    cfg.loss.validate()?;
    let crop = cfg.optim.crop;
    deblur.check_input(&[1, 4, crop, crop])?;
    input_edgenet.check_input(&[1, 3, crop, crop])?;
    if cfg.loss.lambda_edge > 0.0 {
        loss_edgenet.check_input(&[1, 3, crop, crop])?;
    }
    let features = ConvFeatures::build(cfg.perceptual_layer, DEFAULT_FEATURE_SEED)?;
    let guides = Phase2Guides {
        input_edgenet,
        loss_edgenet,
        features: &features,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let mut state = AdamState::new(deblur.params());
    let per_epoch = steps_per_epoch(data.len(), cfg.optim.batch);
    let mut history = Vec::with_capacity(cfg.epochs * per_epoch);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg.optim);
        for _ in 0..per_epoch {
            let step = history.len();
            let batch = random_crop_batch(data, crop, cfg.optim.batch, &mut rng)?;
            let (record, grads) = snapshot_on_abort(
                phase2_step(&deblur, &guides, &batch, &cfg.loss, step)
                    .and_then(|s| check_grads(step, deblur.params(), s)),
                cfg.optim.snapshot_dir.as_deref(),
                &[deblur.params()],
            )?;
            adam_step(deblur.params_mut(), &grads, &mut state, lr, &cfg.optim)?;
            debug!("phase2 {record}");
            history.push(record);
        }
    }
    Ok(DeblurTrainOutcome {
        deblurnet: deblur,
        history,
    })
}

/// Pads `[C,H,W]` at the bottom and right by mirror reflection.
pub fn pad_reflect(img: &Tensor<f32>, pad_h: usize, pad_w: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let j = i % period;
        if j < n {
            j
        } else {
            period - j
        }
    };
    let (oh, ow) = (h + pad_h, w + pad_w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for k in 0..c {
        for y in 0..oh {
            let sy = reflect(y, h);
            for x in 0..ow {
                out.push(d[k * h * w + sy * w + reflect(x, w)]);
            }
        }
    }
    Ok(Tensor::new(vec![c, oh, ow], out)?)
}

/// Top-left `[C,h,w]` window of a `[C,H,W]` image.
pub fn crop_top_left(img: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [c, ih, iw] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    if h > ih || w > iw {
        return Err(Error::config(format!("cannot crop {h}x{w} from {ih}x{iw}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for y in 0..h {
            let row = k * ih * iw + y * iw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], out)?)
}

/// Deblurs one `[3,H,W]` image in `[0,1]` of any size: reflect-pads to the
/// networks' size multiple, runs the edge network then the deblurring
/// network, and removes the padding.
pub fn deblur_image(
    deblur: &DeblurNet,
    edgenet: &EdgeNet,
    blurry: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (h, w) = match *blurry.shape() {
        [3, h, w] => (h, w),
        ref s => {
            return Err(Error::config(format!(
                "deblur expects a [3,H,W] image, got {s:?}"
            )))
        }
    };
    let m = lcm(deblur.config().divisor(), edgenet.variant().divisor());
    let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
    let padded = pad_reflect(blurry, ph, pw)?;
    let x = padded.reshape(vec![1, 3, h + ph, w + pw])?;
    let edge = edgenet.predict_primary(&x)?;
    let y = deblur.predict(&deblur_input(&x, &edge)?)?;
    let y = to_unit(&y).reshape(vec![3, h + ph, w + pw])?;
    crop_top_left(&y, h, w)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Scores `restore(pair)` against each pair's clear image.
pub fn evaluate_with(
    dataset: &[(String, SamplePair)],
    metrics: &MetricConfig,
    mut restore: impl FnMut(&SamplePair) -> Result<Tensor<f32>>,
) -> Result<MetricReport> {
    let mut report = MetricReport::new(metrics.metrics.clone());
    for (id, pair) in dataset {
        let out = restore(pair)?;
        report.push(id.clone(), metrics.score_all(&out, &pair.clear)?);
    }
    Ok(report)
}

/// Deblurs every blurry image and scores it against the clear image.
pub fn evaluate(
    deblur: &DeblurNet,
    edgenet: &EdgeNet,
    dataset: &[(String, SamplePair)],
    metrics: &MetricConfig,
) -> Result<MetricReport> {
    evaluate_with(dataset, metrics, |p| {
        deblur_image(deblur, edgenet, &p.blurry)
    })
}
