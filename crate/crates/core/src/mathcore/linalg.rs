//! Stable reductions and symmetric matrix functions.

use super::matrix::{norm2, Matrix};
use crate::error::{Error, Result};

/// Default lower bound on the norm accepted by [`unit_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Tolerance for symmetry and negative eigenvalues of PSD inputs, relative to
/// `max(1, max |s_ij|)`.
pub const PSD_TOL: f64 = 1e-10;

/// `log Σ exp(x)` over the finite-or-`+∞` entries; `-∞` entries are skipped.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-probabilities `z_c + ln w_c − log Σ_{w_j>0} w_j e^{z_j}`.
///
/// Entries with zero weight are left out of the normalizer and reported as
/// `-∞`. Without weights this is the ordinary log-softmax.
pub fn log_softmax(logits: &[f64], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("log_softmax: non-finite logit".into()));
    }
    let shifted: Vec<f64> = match weights {
        None => logits.to_vec(),
        Some(w) => {
            if w.len() != logits.len() {
                return Err(Error::shape("log_softmax weights", logits.len(), w.len()));
            }
            if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::Input(
                    "log_softmax: weights must be finite and nonnegative".into(),
                ));
            }
            if w.iter().all(|&v| v == 0.0) {
                return Err(Error::Domain("log_softmax: all weights are zero".into()));
            }
            logits
                .iter()
                .zip(w)
                .map(|(&z, &wc)| if wc > 0.0 { z + wc.ln() } else { f64::NEG_INFINITY })
                .collect()
        }
    };
    let lse = logsumexp(&shifted);
    Ok(shifted.iter().map(|&v| v - lse).collect())
}

pub fn unit_normalize(v: &[f64]) -> Result<Vec<f64>> {
    unit_normalize_eps(v, EPS_NORM)
}

pub fn unit_normalize_eps(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = norm2(v);
    if !n.is_finite() {
        return Err(Error::Input("unit_normalize: non-finite input".into()));
    }
    if n <= eps {
        return Err(Error::Domain(format!(
            "unit_normalize: norm {n:e} is below {eps:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, V)` with eigenvectors in the columns of `V`, so
/// that `S = V·diag(λ)·Vᵀ`. Eigenvalues are sorted in descending order.
pub fn symmetric_eigen(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::shape("symmetric_eigen", "square matrix", format!("{:?}", s.shape())));
    }
    if !s.is_finite() {
        return Err(Error::Input("symmetric_eigen: non-finite entry".into()));
    }
    let mut a = s.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vs = Matrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vs[(k, new)] = v[(k, old)];
        }
    }
    Ok((values, vs))
}

fn psd_scale(s: &Matrix) -> f64 {
    s.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Checks symmetry and positive semi-definiteness within [`PSD_TOL`].
pub fn check_psd(s: &Matrix, what: &str) -> Result<()> {
    eigen_psd(s, what).map(|_| ())
}

fn eigen_psd(s: &Matrix, what: &str) -> Result<(Vec<f64>, Matrix)> {
    if s.rows() != s.cols() {
        return Err(Error::shape("psd check", "square matrix", format!("{:?}", s.shape())));
    }
    let tol = PSD_TOL * psd_scale(s);
    let asym = s.asymmetry();
    if asym > tol {
        return Err(Error::Domain(format!("{what}: asymmetric by {asym:e}")));
    }
    let (vals, vecs) = symmetric_eigen(s)?;
    if let Some(&min) = vals.last() {
        if min < -tol {
            return Err(Error::Domain(format!(
                "{what}: indefinite, smallest eigenvalue {min:e}"
            )));
        }
    }
    Ok((vals, vecs))
}

/// Symmetric PSD square root `R` with `R·R = S`. Eigenvalues within the
/// tolerance below zero are clamped to zero.
pub fn psd_sqrt(s: &Matrix) -> Result<Matrix> {
    let (vals, v) = eigen_psd(s, "psd_sqrt")?;
    let n = vals.len();
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, r) in roots.iter().enumerate() {
                acc += v[(i, k)] * r * v[(j, k)];
            }
            out[(i, j)] = acc;
            out[(j, i)] = acc;
        }
    }
    Ok(out)
}
