//! Blur kernel synthesis (isotropic Gaussian and random camera-shake
//! trajectories) and kernel application.

use eadnet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::canny::{canny, to_luma, CannyConfig};
use crate::error::{Error, Result};
use crate::SamplePair;

/// Largest supported kernel side.
pub const MAX_KERNEL_SIZE: usize = 31;

const MIN_SIGMA: f64 = 0.3;
const MAX_SIGMA: f64 = 5.0;

/// Square, nonnegative, unit-sum blur kernel (point spread function).
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    /// Validates and normalizes raw weights.
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) || size > MAX_KERNEL_SIZE {
            return Err(Error::config(format!(
                "kernel size must be odd and at most {MAX_KERNEL_SIZE}, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(Error::config(format!(
                "kernel of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::config(
                "kernel weights must be finite and nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("kernel has no mass"));
        }
        Ok(Self {
            size,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn delta(size: usize) -> Result<Self> {
        let mut w = vec![0.0; size * size];
        w[size * size / 2] = 1.0;
        Self::new(size, w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

/// Isotropic Gaussian sampled at cell centers; `sigma` is clamped to
/// `[0.3, 5]` and the side is `2 * ceil(3 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> BlurKernel {
    let sigma = sigma.clamp(MIN_SIGMA, MAX_SIGMA);
    let radius = (3.0 * sigma).ceil() as usize;
    let size = 2 * radius + 1;
    let r = radius as f64;
    let weights = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - r, (i % size) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    BlurKernel::new(size, weights).expect("gaussian kernel is well formed")
}

/// Camera-shake trajectory model.
///
/// A particle moves at constant speed; each step its velocity receives a
/// Gaussian push scaled by `anxiety` plus a pull toward the origin, and with
/// probability `impulse_prob * anxiety` a big shake that roughly reverses
/// direction. Positions are then centered on their centroid and clipped to a
/// `max_extent` wide box.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryParams {
    pub n_samples: usize,
    pub max_extent: f64,
    pub anxiety: f64,
    pub impulse_prob: f64,
    pub initial_speed_scale: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            max_extent: 16.0,
            anxiety: 0.005,
            impulse_prob: 0.2,
            initial_speed_scale: 0.5,
        }
    }
}

impl TrajectoryParams {
    pub fn validate(&self, kernel_size: usize) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::config("trajectory needs at least 2 samples"));
        }
        if !(self.max_extent >= 0.0 && self.max_extent < kernel_size as f64) {
            return Err(Error::config(format!(
                "max_extent {} must be nonnegative and below the kernel size {kernel_size}",
                self.max_extent
            )));
        }
        if self.anxiety < 0.0
            || !(0.0..=1.0).contains(&self.impulse_prob)
            || self.initial_speed_scale < 0.0
        {
            return Err(Error::config("trajectory dynamics parameters out of range"));
        }
        Ok(())
    }
}

/// Upper bound of the random noise gain and centripetal pull drawn per trajectory.
const NOISE_GAIN: f64 = 10.0;
const CENTRIPETAL_GAIN: f64 = 0.7;

/// Sub-pixel positions `(x, y)` of a random shake trajectory, relative to its centroid.
pub fn motion_trajectory(params: &TrajectoryParams, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n_samples.max(2);
    let unit = params.max_extent / (n - 1) as f64;
    let speed = 2.0 * params.initial_speed_scale * unit;
    let noise = NOISE_GAIN * rng.random::<f64>();
    let centripetal = CENTRIPETAL_GAIN * rng.random::<f64>();
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let mut v = (speed * angle.cos(), speed * angle.sin());
    let mut p = (0.0f64, 0.0f64);
    let mut points = Vec::with_capacity(n);
    points.push(p);
    for _ in 1..n {
        let mut dv = (0.0, 0.0);
        if rng.random::<f64>() < params.impulse_prob * params.anxiety {
            let turn = std::f64::consts::PI + rng.random::<f64>() - 0.5;
            let (s, c) = turn.sin_cos();
            dv = (2.0 * (v.0 * c - v.1 * s), 2.0 * (v.0 * s + v.1 * c));
        }
        let gx: f64 = rng.sample(StandardNormal);
        let gy: f64 = rng.sample(StandardNormal);
        dv.0 += params.anxiety * (noise * gx - centripetal * p.0) * unit;
        dv.1 += params.anxiety * (noise * gy - centripetal * p.1) * unit;
        v = (v.0 + dv.0, v.1 + dv.1);
        let norm = (v.0 * v.0 + v.1 * v.1).sqrt();
        v = if norm > 0.0 && speed > 0.0 {
            (v.0 / norm * speed, v.1 / norm * speed)
        } else {
            (0.0, 0.0)
        };
        p = (p.0 + v.0, p.1 + v.1);
        points.push(p);
    }
    let (cx, cy) = points
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
    let (cx, cy) = (cx / n as f64, cy / n as f64);
    let half = params.max_extent / 2.0;
    points
        .into_iter()
        .map(|(x, y)| ((x - cx).clamp(-half, half), (y - cy).clamp(-half, half)))
        .collect()
}

/// Splats every trajectory point onto its four surrounding cells with bilinear
/// weights. Point `(0, 0)` is the center cell.
pub fn trajectory_to_kernel(traj: &[(f64, f64)], size: usize) -> Result<BlurKernel> {
    if size.is_multiple_of(2) || size > MAX_KERNEL_SIZE {
        return Err(Error::config(format!(
            "kernel size {size} must be odd and <= {MAX_KERNEL_SIZE}"
        )));
    }
    if traj.is_empty() {
        return Err(Error::config("empty trajectory"));
    }
    let c = (size / 2) as f64;
    let last = (size - 1) as f64;
    let mut w = vec![0.0; size * size];
    for &(px, py) in traj {
        let (x, y) = (c + px, c + py);
        if !(x >= 0.0 && y >= 0.0 && x <= last && y <= last) {
            return Err(Error::config(format!(
                "trajectory point ({px:.3}, {py:.3}) falls outside the {size}x{size} kernel"
            )));
        }
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        w[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
        w[y0 * size + x1] += fx * (1.0 - fy);
        w[y1 * size + x0] += (1.0 - fx) * fy;
        w[y1 * size + x1] += fx * fy;
    }
    BlurKernel::new(size, w)
}

/// Random motion kernel of the given size.
pub fn motion_kernel(params: &TrajectoryParams, size: usize, seed: u64) -> Result<BlurKernel> {
    params.validate(size)?;
    trajectory_to_kernel(&motion_trajectory(params, seed), size)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

/// Per-channel 2-D correlation of a `[C,H,W]` image with reflect padding.
pub fn apply_blur(img: &Tensor<f32>, kernel: &BlurKernel) -> Result<Tensor<f32>> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::config(format!(
                "expected a [C,H,W] image, got {:?}",
                img.shape()
            )))
        }
    };
    let k = kernel.size();
    if k > h || k > w {
        return Err(Error::config(format!(
            "kernel of size {k} is larger than the {h}x{w} image"
        )));
    }
    let r = (k / 2) as isize;
    let taps: Vec<(isize, isize, f64)> = (0..k * k)
        .filter(|&i| kernel.weights()[i] > 0.0)
        .map(|i| {
            (
                (i / k) as isize - r,
                (i % k) as isize - r,
                kernel.weights()[i],
            )
        })
        .collect();
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    let mut acc = vec![0.0f64; w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            acc.fill(0.0);
            for &(dy, dx, wt) in &taps {
                let row = &plane[reflect(y as isize + dy, h) * w..][..w];
                for (x, a) in acc.iter_mut().enumerate() {
                    *a += wt * row[reflect(x as isize + dx, w)] as f64;
                }
            }
            out.extend(acc.iter().map(|&v| v as f32));
        }
    }
    Ok(Tensor::new(img.shape().to_vec(), out)?)
}

/// Which degradation family [`synth_pair`] drew.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlurMode {
    Gaussian,
    Motion,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Probability of motion blur when `mode` is `Mixed`.
    pub p_motion: f64,
    pub gaussian_sigma_range: (f64, f64),
    pub kernel_size: usize,
    pub trajectory: TrajectoryParams,
    pub mode: BlurMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            p_motion: 0.5,
            gaussian_sigma_range: (1.0, 3.0),
            kernel_size: MAX_KERNEL_SIZE,
            trajectory: TrajectoryParams::default(),
            mode: BlurMode::Mixed,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_motion) {
            return Err(Error::config("p_motion must lie in [0, 1]"));
        }
        let (lo, hi) = self.gaussian_sigma_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(
                "sigma range must be positive with low <= high",
            ));
        }
        self.trajectory.validate(self.kernel_size)
    }
}

/// Record of the kernel used for one synthesized pair.
#[derive(Debug, Clone, PartialEq)]
pub enum BlurInfo {
    Gaussian { sigma: f64, size: usize },
    Motion { seed: u64, size: usize },
}

impl BlurInfo {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Gaussian { .. } => "gaussian",
            Self::Motion { .. } => "motion",
        }
    }
}

/// Mixes a base seed with an item index (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds one (clear, blurry, edge) training triple from a clear RGB image
/// in `[0, 1]`. Ground-truth edges come from the clear image.
pub fn synth_pair(
    clear: &Tensor<f32>,
    cfg: &SynthConfig,
    canny_cfg: &CannyConfig,
    seed: u64,
) -> Result<(SamplePair, BlurInfo)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = match cfg.mode {
        BlurMode::Gaussian => false,
        BlurMode::Motion => true,
        BlurMode::Mixed => rng.random::<f64>() < cfg.p_motion,
    };
    let (kernel, info) = if motion {
        let kseed = rng.random::<u64>();
        let k = motion_kernel(&cfg.trajectory, cfg.kernel_size, kseed)?;
        let size = k.size();
        (k, BlurInfo::Motion { seed: kseed, size })
    } else {
        let (lo, hi) = cfg.gaussian_sigma_range;
        let sigma = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let k = gaussian_kernel(sigma);
        let size = k.size();
        (k, BlurInfo::Gaussian { sigma, size })
    };
    let blurry = apply_blur(clear, &kernel)?;
    let edge = canny(&to_luma(clear)?, canny_cfg)?;
    let [h, w] = [edge.shape()[0], edge.shape()[1]];
    Ok((
        SamplePair {
            clear: clear.clone(),
            blurry,
            edge: edge.reshape(vec![1, h, w])?,
        },
        info,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(size: usize) -> Tensor<f32> {
        let mut d = vec![0.0; size * size];
        d[(size / 2) * size + size / 2] = 1.0;
        Tensor::new(vec![1, size, size], d).unwrap()
    }

    #[test]
    fn gaussian_sigma_one() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.size(), 7);
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_isotropic_and_peaked() {
        for sigma in [0.5, 1.3, 2.7] {
            let k = gaussian_kernel(sigma);
            let s = k.size();
            let c = s / 2;
            for r in 0..s {
                for col in 0..s {
                    // 90 degree rotation: (r, c) -> (c, s-1-r)
                    assert!((k.at(r, col) - k.at(col, s - 1 - r)).abs() < 1e-15);
                    assert!(k.at(r, col) <= k.at(c, c));
                }
            }
        }
    }

    #[test]
    fn gaussian_minimum_sigma_is_sharp() {
        let k = gaussian_kernel(0.1);
        assert_eq!(k.size(), 3);
        assert!(k.at(1, 1) > 0.9);
    }

    #[test]
    fn stationary_trajectory() {
        let p = TrajectoryParams {
            anxiety: 0.0,
            impulse_prob: 0.0,
            initial_speed_scale: 0.0,
            ..TrajectoryParams::default()
        };
        let t = motion_trajectory(&p, 9);
        assert!(t.iter().all(|&q| q == t[0]));
    }

    #[test]
    fn trajectory_is_deterministic() {
        let p = TrajectoryParams::default();
        assert_eq!(motion_trajectory(&p, 42), motion_trajectory(&p, 42));
        assert_ne!(motion_trajectory(&p, 42), motion_trajectory(&p, 43));
    }

    #[test]
    fn splat_center_and_half_offset() {
        let k = trajectory_to_kernel(&[(0.0, 0.0)], 5).unwrap();
        assert_eq!(k, BlurKernel::delta(5).unwrap());
        let k = trajectory_to_kernel(&[(0.5, 0.0)], 5).unwrap();
        assert!((k.at(2, 2) - 0.5).abs() < 1e-15 && (k.at(2, 3) - 0.5).abs() < 1e-15);
        assert!(trajectory_to_kernel(&[(3.0, 0.0)], 5).is_err());
    }

    #[test]
    fn delta_blur_is_identity() {
        let img = Tensor::from_fn(vec![3, 9, 11], |i| (i % 17) as f32 / 16.0);
        assert_eq!(
            apply_blur(&img, &BlurKernel::delta(5).unwrap()).unwrap(),
            img
        );
    }

    #[test]
    fn box_kernel_on_impulse() {
        let k = BlurKernel::new(3, vec![1.0; 9]).unwrap();
        let out = apply_blur(&impulse(7), &k).unwrap();
        for y in 0..7 {
            for x in 0..7 {
                let v = out.data()[y * 7 + x] as f64;
                let inside = (2..=4).contains(&y) && (2..=4).contains(&x);
                let want = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-7, "({y},{x}) = {v}");
            }
        }
    }

    #[test]
    fn constant_image_unchanged() {
        let img = Tensor::<f32>::full(vec![3, 40, 40], 0.375);
        let k = motion_kernel(&TrajectoryParams::default(), 31, 5).unwrap();
        let out = apply_blur(&img, &k).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.375).abs() < 1e-6));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let img = Tensor::<f32>::zeros(vec![1, 8, 40]);
        assert!(apply_blur(&img, &gaussian_kernel(3.0)).is_err());
    }

    #[test]
    fn pure_gaussian_branch() {
        let img = Tensor::from_fn(vec![3, 32, 32], |i| ((i * 7919) % 101) as f32 / 100.0);
        let cfg = SynthConfig {
            p_motion: 0.0,
            ..SynthConfig::default()
        };
        for seed in 0..10 {
            let (_, info) = synth_pair(&img, &cfg, &CannyConfig::default(), seed).unwrap();
            match info {
                BlurInfo::Gaussian { sigma, .. } => assert!((1.0..=3.0).contains(&sigma)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }
}
