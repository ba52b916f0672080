//! Spectral normalization by power iteration.
//!
//! A weight tensor of shape `[out, ...]` is viewed as an `out × rest` matrix.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the singular value estimate (all-zero weights).
pub const SIGMA_FLOOR: f64 = 1e-12;

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    let rows = *w
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("spectral norm of a scalar".into()))?;
    if rows == 0 {
        return Err(Error::Shape("spectral norm of an empty weight".into()));
    }
    Ok((rows, w.numel() / rows))
}

/// `Wᵀu`
fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let ur = u[r];
        for (vc, wc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vc += ur * wc;
        }
    }
    v
}

/// `Wv`
fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Run `iters` power-iteration steps from `u`, updating it in place.
/// Returns `(σ, v)` with `σ = uᵀWv` floored at [`SIGMA_FLOOR`].
pub fn power_iteration(w: &Tensor, u: &mut [f64], iters: usize) -> Result<(f64, Vec<f64>)> {
    let (rows, cols) = matrix_dims(w)?;
    if u.len() != rows {
        return Err(Error::Shape(format!(
            "u has {} entries, weight has {rows} rows",
            u.len()
        )));
    }
    if iters == 0 {
        return Err(Error::Contract("power iteration needs iters >= 1".into()));
    }
    if u.iter().all(|x| *x == 0.0) {
        return Err(Error::Contract("power iteration needs a nonzero u".into()));
    }
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        v = mat_t_vec(w.data(), rows, cols, u);
        normalize(&mut v);
        let mut nu = mat_vec(w.data(), rows, cols, &v);
        normalize(&mut nu);
        if nu.iter().any(|x| *x != 0.0) {
            u.copy_from_slice(&nu);
        }
    }
    let wv = mat_vec(w.data(), rows, cols, &v);
    let sigma = u.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>();
    Ok((sigma.max(SIGMA_FLOOR), v))
}

/// Power iteration until the residual `|Wv − σu| / σ` drops below `tol`, at
/// most `max_iters` steps. For `v = Wᵀu / |Wᵀu|` and `σ = uᵀWv` the pair also
/// satisfies `Wᵀu = σv`, so σ is then within `tol·σ` of a singular value.
/// Returns `(σ, iterations used)`.
pub fn power_iteration_to(
    w: &Tensor,
    u: &mut [f64],
    tol: f64,
    max_iters: usize,
) -> Result<(f64, usize)> {
    let (rows, cols) = matrix_dims(w)?;
    let mut sigma = SIGMA_FLOOR;
    for it in 1..=max_iters {
        let (s, v) = sigma_estimate(w, u)?;
        sigma = s;
        let wv = mat_vec(w.data(), rows, cols, &v);
        let res = wv
            .iter()
            .zip(u.iter())
            .map(|(a, b)| (a - s * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if s <= SIGMA_FLOOR || res <= tol * s {
            return Ok((sigma, it));
        }
        power_iteration(w, u, 1)?;
    }
    Ok((sigma, max_iters))
}

/// Returns `(W / σ, updated u, σ)`.
pub fn spectral_normalize(
    weight: &Tensor,
    u: &[f64],
    iters: usize,
) -> Result<(Tensor, Vec<f64>, f64)> {
    let mut u = u.to_vec();
    let (sigma, _) = power_iteration(weight, &mut u, iters)?;
    Ok((weight.scaled(1.0 / sigma), u, sigma))
}

/// `σ = uᵀWv` with `v = Wᵀu / |Wᵀu|`, for a fixed `u`. Returns `(σ, v)`.
pub fn sigma_estimate(w: &Tensor, u: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (rows, cols) = matrix_dims(w)?;
    if u.len() != rows {
        return Err(Error::Shape(format!(
            "u has {} entries, weight has {rows} rows",
            u.len()
        )));
    }
    let mut v = mat_t_vec(w.data(), rows, cols, u);
    normalize(&mut v);
    let sigma = u
        .iter()
        .zip(mat_vec(w.data(), rows, cols, &v))
        .map(|(a, b)| a * b)
        .sum::<f64>()
        .max(SIGMA_FLOOR);
    Ok((sigma, v))
}

/// `W / σ(W)` with `σ = uᵀWv` for fixed estimates `u`, `v`.
///
/// The backward pass differentiates through `σ`:
/// `∂L/∂W = G/σ − (⟨G, W⟩/σ²)·u vᵀ`.
pub fn spectral_norm_var<'t>(w: &Var<'t>, u: &[f64]) -> Result<Var<'t>> {
    let wv = w.value();
    let (rows, cols) = matrix_dims(&wv)?;
    let (sigma, v) = sigma_estimate(&wv, u)?;
    let value = wv.scaled(1.0 / sigma);
    let u = u.to_vec();
    Ok(w.tape().op(value, &[*w], move |g| {
        let gw = g.dot(&wv);
        let coef = gw / (sigma * sigma);
        let mut out = g.scaled(1.0 / sigma);
        for r in 0..rows {
            let cu = coef * u[r];
            for (o, vc) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(&v) {
                *o -= cu * vc;
            }
        }
        vec![out]
    }))
}
