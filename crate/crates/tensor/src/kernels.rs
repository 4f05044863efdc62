//! Forward and backward kernels on raw tensors. The tape in [`crate::tape`]
//! records which of these ran; inference code may also call them directly.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        (height, width): (usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        if height + 2 * padding < kernel_h {
            return Err(TensorError::Dim {
                op: "conv2d",
                dim: "padded height",
                expected: kernel_h,
                actual: height + 2 * padding,
            });
        }
        if width + 2 * padding < kernel_w {
            return Err(TensorError::Dim {
                op: "conv2d",
                dim: "padded width",
                expected: kernel_w,
                actual: width + 2 * padding,
            });
        }
        Ok(Self {
            in_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose input column `ox*stride + kj - pad` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.padding {
            0
        } else {
            (self.padding - kj).div_ceil(s)
        };
        let hi_excl = if self.width + self.padding > kj {
            ((self.width - 1 + self.padding - kj) / s + 1).min(self.out_w)
        } else {
            0
        };
        (lo.min(hi_excl), hi_excl)
    }
}

fn im2col<T: Element>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (h, w, ow) = (g.height, g.width, g.out_w);
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = lo + kj - g.padding;
                        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            seg[ox] = src[ox * g.stride + kj - g.padding];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let (h, w, ow) = (g.height, g.width, g.out_w);
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &src[oy * ow..(oy + 1) * ow];
                    for ox in lo..hi {
                        let ix = ox * g.stride + kj - g.padding;
                        dst[ix] = dst[ix] + seg[ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolutions with this few output channels and stride 1 skip im2col: a
/// GEMM with a handful of rows spends its time packing the column matrix.
const DIRECT_MAX_COUT: usize = 8;

fn use_direct(g: &ConvGeometry, cout: usize) -> bool {
    cout <= DIRECT_MAX_COUT && g.stride == 1 && !g.is_pointwise()
}

/// Calls `f(c, ki, kj, oy, iy, lo, hi)` for every input row feeding output
/// row `oy` through tap `(ki, kj)`; output columns `lo..hi` read input
/// columns `lo + kj - pad ..`.
fn for_each_tap_row(
    g: &ConvGeometry,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize),
) {
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = g.valid_cols(kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.out_h {
                    let iy = (oy + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    f(c, ki, kj, oy, iy as usize, lo, hi);
                }
            }
        }
    }
}

fn direct_forward<T: Element>(img: &[T], weight: &[T], cout: usize, g: &ConvGeometry, y: &mut [T]) {
    let (h, w, ow, p, k) = (g.height, g.width, g.out_w, g.out_len(), g.patch_len());
    let kk = g.kernel_h * g.kernel_w;
    for_each_tap_row(g, |c, ki, kj, oy, iy, lo, hi| {
        let src = &img[c * h * w + iy * w + lo + kj - g.padding..][..hi - lo];
        for o in 0..cout {
            let wv = weight[o * k + c * kk + ki * g.kernel_w + kj];
            let dst = &mut y[o * p + oy * ow + lo..][..hi - lo];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + wv * s;
            }
        }
    });
}

fn direct_backward<T: Element>(
    img: &[T],
    weight: &[T],
    dy: &[T],
    cout: usize,
    g: &ConvGeometry,
    mut dimg: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (h, w, ow, p, k) = (g.height, g.width, g.out_w, g.out_len(), g.patch_len());
    let kk = g.kernel_h * g.kernel_w;
    for_each_tap_row(g, |c, ki, kj, oy, iy, lo, hi| {
        let off = c * h * w + iy * w + lo + kj - g.padding;
        let tap = c * kk + ki * g.kernel_w + kj;
        for o in 0..cout {
            let grad = &dy[o * p + oy * ow + lo..][..hi - lo];
            if let Some(dw) = dw.as_deref_mut() {
                let src = &img[off..][..hi - lo];
                let dot = grad
                    .iter()
                    .zip(src)
                    .fold(T::zero(), |a, (&gv, &s)| a + gv * s);
                dw[o * k + tap] = dw[o * k + tap] + dot;
            }
            if let Some(dimg) = dimg.as_deref_mut() {
                let wv = weight[o * k + tap];
                for (d, &gv) in dimg[off..][..hi - lo].iter_mut().zip(grad) {
                    *d = *d + wv * gv;
                }
            }
        }
    });
}

fn check_conv_args<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<([usize; 4], usize, ConvGeometry)> {
    let [n, cin, h, w] = input.dims4("conv2d input")?;
    let [cout, wcin, kh, kw] = weight.dims4("conv2d weight")?;
    if wcin != cin {
        return Err(TensorError::Dim {
            op: "conv2d",
            dim: "in_channels",
            expected: cin,
            actual: wcin,
        });
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(TensorError::Dim {
                op: "conv2d",
                dim: "bias length",
                expected: cout,
                actual: b.len(),
            });
        }
    }
    let g = ConvGeometry::new(cin, (h, w), (kh, kw), stride, padding)?;
    Ok(([n, cin, h, w], cout, g))
}

/// Zero-padded 2-D cross-correlation, `[N,Cin,H,W] * [Cout,Cin,kh,kw] -> [N,Cout,H',W']`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let ([n, cin, h, w], cout, g) = check_conv_args(input, weight, bias, stride, padding)?;
    let k = g.patch_len();
    let p = g.out_len();
    let mut out = vec![T::zero(); n * cout * p];
    let direct = use_direct(&g, cout);
    let mut cols = if g.is_pointwise() || direct {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let x = input.data();
    for i in 0..n {
        let img = &x[i * cin * h * w..(i + 1) * cin * h * w];
        let y = &mut out[i * cout * p..(i + 1) * cout * p];
        if direct {
            if let Some(b) = bias {
                for (o, &bv) in b.data().iter().enumerate() {
                    y[o * p..(o + 1) * p].fill(bv);
                }
            }
            direct_forward(img, weight.data(), cout, &g, y);
            continue;
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut cols);
            &cols
        };
        let beta = match bias {
            Some(b) => {
                for (o, &bv) in b.data().iter().enumerate() {
                    y[o * p..(o + 1) * p].fill(bv);
                }
                T::one()
            }
            None => T::zero(),
        };
        T::gemm(
            cout,
            k,
            p,
            weight.data(),
            (k, 1),
            cols_ref,
            (p, 1),
            beta,
            y,
            (p, 1),
        );
    }
    Ok(Tensor::from_parts(vec![n, cout, g.out_h, g.out_w], out))
}

/// Gradients of [`conv2d`]; each output is only computed when requested.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    want: (bool, bool, bool),
) -> Result<Conv2dGrads<T>> {
    let ([n, cin, h, w], cout, g) = check_conv_args(input, weight, None, stride, padding)?;
    let k = g.patch_len();
    let p = g.out_len();
    let (want_x, want_w, want_b) = want;
    let mut dx = want_x.then(|| vec![T::zero(); n * cin * h * w]);
    let mut dw = want_w.then(|| vec![T::zero(); cout * k]);
    let mut db = want_b.then(|| vec![T::zero(); cout]);
    let pointwise = g.is_pointwise();
    let direct = use_direct(&g, cout);
    let mut cols = if pointwise || direct {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let x = input.data();
    let dy_all = grad_out.data();
    for i in 0..n {
        let dy = &dy_all[i * cout * p..(i + 1) * cout * p];
        let img = &x[i * cin * h * w..(i + 1) * cin * h * w];
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dy[o * p..(o + 1) * p].iter().copied().sum();
            }
        }
        if direct {
            let dimg = dx
                .as_mut()
                .map(|d| &mut d[i * cin * h * w..(i + 1) * cin * h * w]);
            direct_backward(img, weight.data(), dy, cout, &g, dimg, dw.as_deref_mut());
            continue;
        }
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if pointwise {
                img
            } else {
                im2col(img, &g, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            T::gemm(
                cout,
                p,
                k,
                dy,
                (p, 1),
                cols_ref,
                (1, p),
                T::one(),
                dw,
                (k, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[i * cin * h * w..(i + 1) * cin * h * w];
            // dcols = W^T * dY
            if pointwise {
                T::gemm(
                    k,
                    cout,
                    p,
                    weight.data(),
                    (1, k),
                    dy,
                    (p, 1),
                    T::zero(),
                    dimg,
                    (p, 1),
                );
            } else {
                T::gemm(
                    k,
                    cout,
                    p,
                    weight.data(),
                    (1, k),
                    dy,
                    (p, 1),
                    T::zero(),
                    &mut cols,
                    (p, 1),
                );
                col2im_add(&cols, &g, dimg);
            }
        }
    }
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![cout], d)),
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index it was taken from.
pub fn maxpool2<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::invalid(
            "maxpool2",
            format!("spatial size {h}x{w} must be even; pad the input first"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for idx in [
                    base + 2 * oy * w + 2 * ox + 1,
                    base + (2 * oy + 1) * w + 2 * ox,
                    base + (2 * oy + 1) * w + 2 * ox + 1,
                ] {
                    // Strict comparison keeps the first maximum in row-major order.
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

fn shuffle_index(shape_in: [usize; 4], r: usize, n: usize, c: usize, y: usize, x: usize) -> usize {
    let [_, cin, h, w] = shape_in;
    let ci = c * r * r + (y % r) * r + (x % r);
    ((n * cin + ci) * h + y / r) * w + x / r
}

/// `[N, C*r*r, H, W] -> [N, C, r*H, r*W]`.
pub fn pixel_shuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let dims = input.dims4("pixel_shuffle")?;
    let [n, cin, h, w] = dims;
    if r == 0 || cin % (r * r) != 0 {
        return Err(TensorError::invalid(
            "pixel_shuffle",
            format!("channel count {cin} is not divisible by r^2 = {}", r * r),
        ));
    }
    let c = cin / (r * r);
    let x = input.data();
    let mut out = Vec::with_capacity(input.len());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h * r {
                for xx in 0..w * r {
                    out.push(x[shuffle_index(dims, r, ni, ci, y, xx)]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h * r, w * r], out))
}

/// Inverse index map of [`pixel_shuffle`] (also its gradient).
pub fn pixel_unshuffle<T: Element>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, hr, wr] = input.dims4("pixel_unshuffle")?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(TensorError::invalid(
            "pixel_unshuffle",
            format!("spatial size {hr}x{wr} is not divisible by {r}"),
        ));
    }
    let dims = [n, c * r * r, hr / r, wr / r];
    let x = input.data();
    let mut out = vec![T::zero(); input.len()];
    let mut src = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..hr {
                for xx in 0..wr {
                    out[shuffle_index(dims, r, ni, ci, y, xx)] = x[src];
                    src += 1;
                }
            }
        }
    }
    Ok(Tensor::from_parts(dims.to_vec(), out))
}

/// Align-corners sample positions along one axis: `(lo, hi, frac)` per output.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize with align-corners semantics.
pub fn upsample_bilinear<T: Element>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4("upsample_bilinear")?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::invalid(
            "upsample_bilinear",
            "output size must be positive",
        ));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &x[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let (fy1, fy0) = (T::from_f64_lossy(fy), T::from_f64_lossy(1.0 - fy));
            for &(x0, x1, fx) in &tx {
                let (fx1, fx0) = (T::from_f64_lossy(fx), T::from_f64_lossy(1.0 - fx));
                let top = p[y0 * w + x0] * fx0 + p[y0 * w + x1] * fx1;
                let bot = p[y1 * w + x0] * fx0 + p[y1 * w + x1] * fx1;
                out.push(top * fy0 + bot * fy1);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub fn upsample_bilinear_backward<T: Element>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, out_h, out_w] = grad_out.dims4("upsample_bilinear backward")?;
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let g = grad_out.data();
    let mut dx = vec![T::zero(); n * c * in_h * in_w];
    for plane in 0..n * c {
        let d = &mut dx[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        let src = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy1, fy0) = (T::from_f64_lossy(fy), T::from_f64_lossy(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx1, fx0) = (T::from_f64_lossy(fx), T::from_f64_lossy(1.0 - fx));
                let gv = src[oy * out_w + ox];
                d[y0 * in_w + x0] = d[y0 * in_w + x0] + gv * fy0 * fx0;
                d[y0 * in_w + x1] = d[y0 * in_w + x1] + gv * fy0 * fx1;
                d[y1 * in_w + x0] = d[y1 * in_w + x0] + gv * fy1 * fx0;
                d[y1 * in_w + x1] = d[y1 * in_w + x1] + gv * fy1 * fx1;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, in_h, in_w], dx))
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Self::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Self::LeakyRelu(alpha) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64_lossy(alpha)
                }
            }
            Self::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Self::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Self::LeakyRelu(alpha) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64_lossy(alpha)
                }
            }
            Self::Sigmoid => y * (T::one() - y),
            Self::Tanh => T::one() - y * y,
        }
    }
}

pub fn activation<T: Element>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| kind.apply(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    /// Independent sliding-window oracle.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims4("").unwrap();
        let [cout, _, kh, kw] = w.dims4("").unwrap();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.data()
                                            [((ni * cin + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * cin + c) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((ni * cout + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_doubles() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[2., 4., 6., 8., 10., 12., 14., 16., 18.]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = [0.0; 9];
        k[4] = 1.0;
        let w = t(&[1, 1, 3, 3], &k);
        assert_eq!(conv2d(&x, &w, None, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_window_sum() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let w = t(&[1, 1, 2, 2], &[1., 1., 1., 1.]);
        let y = conv2d(&x, &w, Some(&t(&[1], &[0.0])), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut seed = 1u64;
        let mut next = || {
            seed = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(cin, cout, h, w, k, s, p) in &[
            (2, 3, 7, 6, 3, 1, 1),
            (3, 2, 9, 8, 3, 2, 1),
            (1, 4, 11, 11, 9, 4, 4),
            (2, 2, 5, 5, 1, 1, 0),
            (3, 1, 8, 8, 4, 2, 1),
            (2, 2, 6, 7, 5, 1, 0),
            (2, 10, 7, 6, 3, 1, 1),
            (3, 12, 9, 8, 5, 1, 2),
        ] {
            let x = Tensor::from_fn(vec![2, cin, h, w], |_| next());
            let wt = Tensor::from_fn(vec![cout, cin, k, k], |_| next());
            let got = conv2d(&x, &wt, None, s, p).unwrap();
            let want = conv_naive(&x, &wt, s, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn direct_path_matches_gemm_path() {
        // Three output channels take the direct path; embedding the same
        // weights in twelve channels (the rest zero) forces the GEMM path.
        let (cin, h, w, k, p) = (2, 7, 9, 5, 2);
        let x = Tensor::from_fn(vec![2, cin, h, w], |i| ((i * 37 % 23) as f64 - 11.0) / 7.0);
        let small = Tensor::from_fn(vec![3, cin, k, k], |i| ((i * 17 % 13) as f64 - 6.0) / 5.0);
        let per = cin * k * k;
        let wide = Tensor::from_fn(vec![12, cin, k, k], |i| {
            if i < 3 * per {
                small.data()[i]
            } else {
                0.0
            }
        });
        let ys = conv2d(&x, &small, None, 1, p).unwrap();
        let yw = conv2d(&x, &wide, None, 1, p).unwrap();
        let out = h * w;
        for n in 0..2 {
            for i in 0..3 * out {
                assert!((ys.data()[n * 3 * out + i] - yw.data()[n * 12 * out + i]).abs() < 1e-12);
            }
        }
        let dys = Tensor::from_fn(ys.shape().to_vec(), |i| ((i * 29 % 31) as f64 - 15.0) / 9.0);
        let dyw = Tensor::from_fn(yw.shape().to_vec(), |i| {
            let (n, r) = (i / (12 * out), i % (12 * out));
            if r < 3 * out {
                dys.data()[n * 3 * out + r]
            } else {
                0.0
            }
        });
        let gs = conv2d_backward(&x, &small, &dys, 1, p, (true, true, true)).unwrap();
        let gw = conv2d_backward(&x, &wide, &dyw, 1, p, (true, true, true)).unwrap();
        assert!(gs.input.unwrap().max_abs_diff(&gw.input.unwrap()) < 1e-10);
        let (dws, dww) = (gs.weight.unwrap(), gw.weight.unwrap());
        for i in 0..3 * per {
            assert!((dws.data()[i] - dww.data()[i]).abs() < 1e-10);
        }
        assert!((gs.bias.unwrap().data()[2] - gw.bias.unwrap().data()[2]).abs() < 1e-12);
    }

    #[test]
    fn conv_errors_name_dimension() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros(vec![1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(matches!(
            err,
            TensorError::Dim {
                dim: "in_channels",
                expected: 2,
                actual: 3,
                ..
            }
        ));
        let w = Tensor::<f32>::zeros(vec![1, 2, 7, 7]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 1).unwrap_err(),
            TensorError::Dim {
                dim: "padded height",
                ..
            }
        ));
    }

    #[test]
    fn maxpool_basics() {
        let (y, arg) = maxpool2(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let (y, arg) = maxpool2(&Tensor::<f64>::full(vec![1, 64, 32, 32], 0.5)).unwrap();
        assert_eq!(y.shape(), &[1, 64, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.5));
        // tie resolves to the first element of each window
        assert_eq!(arg[0], 0);
        assert!(maxpool2(&Tensor::<f64>::zeros(vec![1, 1, 3, 4])).is_err());
    }

    #[test]
    fn pixel_shuffle_tiles_channels() {
        let x = Tensor::from_fn(vec![1, 4, 2, 2], |i| (i / 4) as f64);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let expect = [
            0., 1., 0., 1., 2., 3., 2., 3., 0., 1., 0., 1., 2., 3., 2., 3.,
        ];
        assert_eq!(y.data(), &expect);
        assert_eq!(pixel_unshuffle(&y, 2).unwrap(), x);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
        assert!(pixel_shuffle(&Tensor::<f64>::zeros(vec![1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn bilinear_align_corners() {
        let x = t(&[1, 1, 1, 2], &[1.0, 3.0]);
        let y = upsample_bilinear(&x, 1, 3).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
        let x = Tensor::from_fn(vec![1, 2, 3, 5], |i| i as f64 * 0.37);
        assert_eq!(upsample_bilinear(&x, 3, 5).unwrap(), x);
        let c = Tensor::<f64>::full(vec![1, 1, 3, 3], 0.7);
        let y = upsample_bilinear(&c, 8, 5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn activations() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(activation(Activation::Relu, &x).data(), &[0.0, 0.0, 2.0]);
        assert!((Activation::LeakyRelu(0.2).apply(-1.0f64) + 0.2).abs() < 1e-15);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert_eq!(Activation::Relu.derivative(0.0f64, 0.0), 0.0);
        assert!(Activation::Sigmoid.apply(-800.0f64) >= 0.0);
    }
}
