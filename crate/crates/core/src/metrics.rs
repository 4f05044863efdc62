//! Full-reference quality metrics: PSNR, SSIM and multi-scale SSIM.
//!
//! Images are `[H,W]`, `[1,H,W]` or `[3,H,W]` tensors. SSIM uses an 11×11
//! Gaussian window (σ = 1.5) evaluated only where it fits entirely inside the
//! image, with `K1 = 0.01`, `K2 = 0.03`.

use std::fmt;
use std::str::FromStr;

use eadnet_tensor::Tensor;

use crate::canny::LUMA;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// `10·log10(peak² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::config("psnr peak must be positive"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// How color images are reduced before SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChannelMode {
    /// Score the luma channel (broadcast weights).
    #[default]
    Luma,
    /// Score each channel and average.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    /// Dynamic range `L` of the pixel values.
    pub data_range: f64,
    pub channels: ChannelMode,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            data_range: 1.0,
            channels: ChannelMode::Luma,
        }
    }
}

/// A single-channel image in f64.
#[derive(Debug, Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn planes(img: &Tensor<f32>, mode: ChannelMode) -> Result<Vec<Plane>> {
    let (c, h, w) = match *img.shape() {
        [h, w] => (1, h, w),
        [c, h, w] | [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::config(format!(
                "metrics expect [C,H,W] images, got {:?}",
                img.shape()
            )))
        }
    };
    let d = img.data();
    let n = h * w;
    let channel = |k: usize| Plane {
        h,
        w,
        data: d[k * n..(k + 1) * n].iter().map(|&v| v as f64).collect(),
    };
    match (c, mode) {
        (1, _) => Ok(vec![channel(0)]),
        (3, ChannelMode::Luma) => Ok(vec![Plane {
            h,
            w,
            data: (0..n)
                .map(|i| (0..3).map(|k| LUMA[k] as f64 * d[k * n + i] as f64).sum())
                .collect(),
        }]),
        (_, _) => Ok((0..c).map(channel).collect()),
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * p[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of two planes.
fn ssim_cs(a: &Plane, b: &Plane, data_range: f64) -> Result<(f64, f64)> {
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.h, a.w
        )));
    }
    let taps = gaussian_window();
    let (h, w) = (a.h, a.w);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&a.data, h, w, &taps);
    let mu_b = filter_valid(&b.data, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    let n = mu_a.len() as f64;
    Ok((ssim_sum / n, cs_sum / n))
}

fn paired_planes(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    mode: ChannelMode,
    op: &'static str,
) -> Result<Vec<(Plane, Plane)>> {
    a.expect_same_shape(b, op)?;
    Ok(planes(a, mode)?.into_iter().zip(planes(b, mode)?).collect())
}

pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    ssim_with(a, b, &SsimOptions::default())
}

/// Mean of the local SSIM map (averaged over channels in per-channel mode).
pub fn ssim_with(a: &Tensor<f32>, b: &Tensor<f32>, opts: &SsimOptions) -> Result<f64> {
    let pairs = paired_planes(a, b, opts.channels, "ssim")?;
    let mut total = 0.0;
    for (pa, pb) in &pairs {
        total += ssim_cs(pa, pb, opts.data_range)?.0;
    }
    Ok(total / pairs.len() as f64)
}

fn avg_pool2(p: &Plane) -> Plane {
    let (h, w) = (p.h / 2, p.w / 2);
    let data = (0..h * w)
        .map(|i| {
            let (y, x) = (2 * (i / w), 2 * (i % w));
            (p.data[y * p.w + x]
                + p.data[y * p.w + x + 1]
                + p.data[(y + 1) * p.w + x]
                + p.data[(y + 1) * p.w + x + 1])
                / 4.0
        })
        .collect();
    Plane { h, w, data }
}

/// Smallest image side accepted by [`ms_ssim`] for a scale count.
pub fn ms_ssim_min_side(scales: usize) -> usize {
    SSIM_WINDOW << (scales.max(1) - 1)
}

pub fn ms_ssim(a: &Tensor<f32>, b: &Tensor<f32>, scales: usize) -> Result<f64> {
    ms_ssim_with(a, b, scales, &SsimOptions::default())
}

/// Multi-scale SSIM: contrast-structure terms at every scale, luminance at
/// the coarsest, combined with the first `scales` standard weights
/// (renormalized to sum to one). Negative terms are clamped to zero before
/// exponentiation.
pub fn ms_ssim_with(
    a: &Tensor<f32>,
    b: &Tensor<f32>,
    scales: usize,
    opts: &SsimOptions,
) -> Result<f64> {
    if !(1..=MS_SSIM_WEIGHTS.len()).contains(&scales) {
        return Err(Error::config(format!(
            "ms-ssim supports 1 to 5 scales, got {scales}"
        )));
    }
    let pairs = paired_planes(a, b, opts.channels, "ms-ssim")?;
    let (h, w) = (pairs[0].0.h, pairs[0].0.w);
    let min = ms_ssim_min_side(scales);
    if h.min(w) < min {
        return Err(Error::config(format!(
            "image {h}x{w} is too small for {scales}-scale MS-SSIM (needs at least {min}x{min}); lower the scale count"
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let wsum: f64 = weights.iter().sum();
    let n_planes = pairs.len();
    let mut total = 0.0;
    for (pa, pb) in pairs {
        let (mut pa, mut pb) = (pa, pb);
        let mut score = 1.0;
        for (s, &wt) in weights.iter().enumerate() {
            let (full, cs) = ssim_cs(&pa, &pb, opts.data_range)?;
            let term = if s + 1 == scales { full } else { cs };
            score *= term.max(0.0).powf(wt / wsum);
            if s + 1 < scales {
                pa = avg_pool2(&pa);
                pb = avg_pool2(&pb);
            }
        }
        total += score;
    }
    Ok(total / n_planes as f64)
}

/// A metric selectable on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    MsSsim,
    /// Mean SSIM against the reference; with one reference per image this is
    /// the SSIM value itself.
    MeanSsim,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Psnr, Metric::Ssim, Metric::MsSsim, Metric::MeanSsim];

    pub fn name(self) -> &'static str {
        match self {
            Self::Psnr => "psnr",
            Self::Ssim => "ssim",
            Self::MsSsim => "ms-ssim",
            Self::MeanSsim => "mean-ssim",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Self::Psnr),
            "ssim" => Ok(Self::Ssim),
            "ms-ssim" | "msssim" | "mssim" => Ok(Self::MsSsim),
            "mean-ssim" => Ok(Self::MeanSsim),
            _ => Err(Error::config(format!(
                "unknown metric {s:?} (expected psnr, ssim, ms-ssim or mean-ssim)"
            ))),
        }
    }
}

/// Settings shared by every metric of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub metrics: Vec<Metric>,
    pub peak: f64,
    pub ssim: SsimOptions,
    pub ms_ssim_scales: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Psnr, Metric::Ssim],
            peak: 1.0,
            ssim: SsimOptions::default(),
            ms_ssim_scales: 5,
        }
    }
}

impl MetricConfig {
    pub fn score(&self, metric: Metric, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
        match metric {
            Metric::Psnr => psnr(pred, truth, self.peak),
            Metric::Ssim | Metric::MeanSsim => ssim_with(pred, truth, &self.ssim),
            Metric::MsSsim => ms_ssim_with(pred, truth, self.ms_ssim_scales, &self.ssim),
        }
    }

    pub fn score_all(&self, pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<Vec<f64>> {
        self.metrics
            .iter()
            .map(|&m| self.score(m, pred, truth))
            .collect()
    }
}

/// Per-image scores for a fixed list of metrics plus their dataset means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub metrics: Vec<Metric>,
    pub rows: Vec<(String, Vec<f64>)>,
}

/// Formats a metric value; infinities print as `inf`.
pub fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn new(metrics: Vec<Metric>) -> Self {
        Self {
            metrics,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) {
        debug_assert_eq!(values.len(), self.metrics.len());
        self.rows.push((id.into(), values));
    }

    /// Arithmetic mean per metric (NaN for an empty report).
    pub fn means(&self) -> Vec<f64> {
        (0..self.metrics.len())
            .map(|j| self.rows.iter().map(|(_, v)| v[j]).sum::<f64>() / self.rows.len() as f64)
            .collect()
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        let j = self.metrics.iter().position(|&m| m == metric)?;
        Some(self.means()[j])
    }

    fn line(&self, id: &str, values: &[f64]) -> String {
        let mut s = id.to_string();
        for (m, &v) in self.metrics.iter().zip(values) {
            s.push('\t');
            s.push_str(&format!("{m}={}", format_value(v)));
        }
        s
    }
}

/// One line per image, `<id>\t<metric>=<value>...`, then a `MEAN` line.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (id, values) in &self.rows {
            writeln!(f, "{}", self.line(id, values))?;
        }
        if !self.rows.is_empty() {
            writeln!(f, "{}", self.line("MEAN", &self.means()))?;
        }
        Ok(())
    }
}
