//! Canny edge detector used to produce binary ground-truth edge maps.

use eadnet_tensor::Tensor;

use crate::error::{Error, Result};

/// Smallest image side the detector accepts.
pub const MIN_SIDE: usize = 7;

/// Broadcast luma weights.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Thresholds are fractions of the largest gradient magnitude in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct CannyConfig {
    pub smooth_sigma: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            smooth_sigma: 1.4,
            low: 0.1,
            high: 0.2,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::config(format!(
                "canny thresholds need 0 < low < high <= 1 (low={}, high={})",
                self.low, self.high
            )));
        }
        if !(self.smooth_sigma >= 0.0) {
            return Err(Error::config("canny smoothing sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// `[3,H,W]` RGB or `[1,H,W]` gray to `[H,W]` luma.
pub fn to_luma(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    match *img.shape() {
        [1, h, w] => Ok(img.reshape(vec![h, w])?),
        [3, h, w] => {
            let d = img.data();
            let n = h * w;
            let out = (0..n)
                .map(|i| LUMA[0] * d[i] + LUMA[1] * d[n + i] + LUMA[2] * d[2 * n + i])
                .collect();
            Ok(Tensor::new(vec![h, w], out)?)
        }
        [h, w] => Ok(img.reshape(vec![h, w])?),
        _ => Err(Error::config(format!(
            "cannot convert shape {:?} to luma",
            img.shape()
        ))),
    }
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
    j.clamp(0, n - 1) as usize
}

fn gaussian_smooth(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = ((3.0 * sigma).ceil() as usize).min(h.min(w) - 1);
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * src[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Gradient magnitude after non-maximum suppression, plus the image-wide
/// maximum magnitude before suppression.
pub fn suppressed_gradient(gray: &Tensor<f32>, sigma: f64) -> Result<(Vec<f64>, f64)> {
    let (h, w) = match *gray.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::config(format!(
                "canny expects [H,W], got {:?}",
                gray.shape()
            )))
        }
    };
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::config(format!(
            "image {h}x{w} is too small for edge detection (minimum {MIN_SIDE}x{MIN_SIDE})"
        )));
    }
    let src: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    let s = gaussian_smooth(&src, h, w, sigma);
    let at = |y: isize, x: isize| s[reflect(y, h) * w + reflect(x, w)];
    let mut mag = vec![0.0; h * w];
    let mut bin = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let mut deg = gy.atan2(gx).to_degrees();
            if deg < 0.0 {
                deg += 180.0;
            }
            bin[i] = match deg {
                d if !(22.5..157.5).contains(&d) => 0,
                d if d < 67.5 => 1,
                d if d < 112.5 => 2,
                _ => 3,
            };
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    let get = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut nms = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = match bin[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let m = mag[i];
            // Asymmetric comparison keeps exactly one pixel of a two-pixel plateau.
            if m > get(y - dy, x - dx) && m >= get(y + dy, x + dx) {
                nms[i] = m;
            }
        }
    }
    Ok((nms, max))
}

/// Binary edge map of a `[H,W]` image in `[0, 1]`.
pub fn canny(gray: &Tensor<f32>, cfg: &CannyConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (h, w) = (gray.shape()[0], *gray.shape().get(1).unwrap_or(&0));
    let (nms, max) = suppressed_gradient(gray, cfg.smooth_sigma)?;
    let mut edges = vec![0.0f32; h * w];
    if max <= 0.0 {
        return Ok(Tensor::new(vec![h, w], edges)?);
    }
    let (low, high) = (cfg.low * max, cfg.high * max);
    let mut stack: Vec<usize> = (0..h * w)
        .filter(|&i| nms[i] > 0.0 && nms[i] >= high)
        .collect();
    for &i in &stack {
        edges[i] = 1.0;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0.0 && nms[j] > 0.0 && nms[j] >= low {
                    edges[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    Ok(Tensor::new(vec![h, w], edges)?)
}
