//! Weight reparameterizations: weight normalization and spectral normalization.
//!
//! Both treat a weight tensor of shape `[out, ...]` as a matrix with one row
//! per output channel.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Directions with a smaller norm than this are rejected as degenerate.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;

pub(crate) fn row_norms<T: Element>(v: &Tensor<T>) -> Vec<f64> {
    let rows = v.shape()[0];
    let cols = v.len() / rows;
    v.data()
        .chunks(cols)
        .map(|r| {
            r.iter()
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub(crate) fn check_weight_norm<T: Element>(v: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<f64>> {
    let rows = v.shape()[0];
    if g.len() != rows {
        return Err(TensorError::Dim {
            op: "weight_norm",
            dim: "magnitude length",
            expected: rows,
            actual: g.len(),
        });
    }
    let norms = row_norms(v);
    if let Some((i, n)) = norms
        .iter()
        .enumerate()
        .find(|(_, &n)| n < MIN_DIRECTION_NORM)
    {
        return Err(TensorError::invalid(
            "weight_norm",
            format!("direction of output channel {i} has norm {n:e}"),
        ));
    }
    Ok(norms)
}

/// `w = g * v / ||v||`, one magnitude per output channel.
pub fn weight_norm_apply<T: Element>(v: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    let norms = check_weight_norm(v, g)?;
    let cols = v.len() / v.shape()[0];
    let mut out = Vec::with_capacity(v.len());
    for (o, row) in v.data().chunks(cols).enumerate() {
        let scale = T::from_f64_lossy(g.data()[o].as_f64() / norms[o]);
        out.extend(row.iter().map(|&x| x * scale));
    }
    Tensor::new(v.shape().to_vec(), out)
}

fn normalize(x: &mut [f64]) {
    let n = x
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(MIN_DIRECTION_NORM);
    x.iter_mut().for_each(|v| *v /= n);
}

/// `W^T u` for `W` viewed as `rows x cols`.
pub(crate) fn mat_t_vec<T: Element>(w: &[T], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, row) in w.chunks(cols).enumerate().take(rows) {
        let ur = u[r];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x.as_f64() * ur;
        }
    }
    out
}

pub(crate) fn mat_vec<T: Element>(w: &[T], cols: usize, v: &[f64]) -> Vec<f64> {
    w.chunks(cols)
        .map(|row| row.iter().zip(v).map(|(&x, &b)| x.as_f64() * b).sum())
        .collect()
}

/// Right singular vector estimate `v = normalize(W^T u)` and `sigma = u^T W v`.
pub fn spectral_estimate<T: Element>(w: &Tensor<T>, u: &[f64]) -> Result<(Vec<f64>, f64)> {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    if u.len() != rows {
        return Err(TensorError::Dim {
            op: "spectral_norm",
            dim: "u length",
            expected: rows,
            actual: u.len(),
        });
    }
    let mut v = mat_t_vec(w.data(), rows, cols, u);
    normalize(&mut v);
    let wv = mat_vec(w.data(), cols, &v);
    let sigma: f64 = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
    Ok((v, sigma))
}

/// Runs `iters` power iterations `u <- normalize(W normalize(W^T u))`.
pub fn power_iteration<T: Element>(w: &Tensor<T>, u: &[f64], iters: usize) -> Result<Vec<f64>> {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    if u.len() != rows {
        return Err(TensorError::Dim {
            op: "power_iteration",
            dim: "u length",
            expected: rows,
            actual: u.len(),
        });
    }
    if u.iter().all(|&x| x == 0.0) {
        return Err(TensorError::invalid("power_iteration", "u must be nonzero"));
    }
    let mut u = u.to_vec();
    normalize(&mut u);
    for _ in 0..iters {
        let mut v = mat_t_vec(w.data(), rows, cols, &u);
        normalize(&mut v);
        u = mat_vec(w.data(), cols, &v);
        normalize(&mut u);
    }
    Ok(u)
}

/// Divides `W` by its top singular value estimated with `iters` power
/// iterations started from `u`. Returns the normalized weight and the updated
/// `u`, which the caller persists for the next call.
pub fn spectral_norm_apply<T: Element>(
    w: &Tensor<T>,
    u: &Tensor<T>,
    iters: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if iters == 0 {
        return Err(TensorError::invalid(
            "spectral_norm",
            "iters must be at least 1",
        ));
    }
    let u0: Vec<f64> = u.data().iter().map(|x| x.as_f64()).collect();
    let u1 = power_iteration(w, &u0, iters)?;
    let (_, sigma) = spectral_estimate(w, &u1)?;
    if sigma.abs() < MIN_DIRECTION_NORM {
        return Err(TensorError::invalid(
            "spectral_norm",
            "weight has zero spectral norm",
        ));
    }
    let inv = T::from_f64_lossy(1.0 / sigma);
    Ok((
        w.map(|x| x * inv),
        Tensor::new(
            vec![u1.len()],
            u1.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        )?,
    ))
}
