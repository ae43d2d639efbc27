use nalgebra::DMatrix;

use super::rng::Rng;
use super::tensor::{dot, Tensor};
use crate::error::{CilError, Result};

/// Number of tenfold jitter escalations tried after the first jittered attempt.
pub const JITTER_ESCALATIONS: u32 = 6;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CilError::dim("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(CilError::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    /// Lower-triangular `L` with `L·Lᵀ = Σ + jitter_applied·I`.
    pub lower: Tensor,
    pub jitter_applied: f64,
}

/// Cholesky factorization with diagonal jitter.
///
/// Tries `Σ` as given, then `Σ + j·I` for `j = jitter · 10^k`,
/// `k = 0..=JITTER_ESCALATIONS`. With `jitter == 0` only the first attempt
/// is made.
pub fn cholesky(sigma: &Tensor, jitter: f64) -> Result<CholeskyFactor> {
    let n = sigma.rows();
    if sigma.rank() != 2 || sigma.cols() != n {
        return Err(CilError::dim("cholesky", sigma.shape(), &[n, n]));
    }
    if !sigma.is_finite() || !(jitter >= 0.0) {
        return Err(CilError::Degenerate("cholesky input is not finite".into()));
    }
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (sigma.get(i, j), sigma.get(j, i));
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(CilError::contract("cholesky input is not symmetric"));
            }
        }
    }
    let mut attempts = vec![0.0];
    if jitter > 0.0 {
        attempts.extend((0..=JITTER_ESCALATIONS).map(|k| jitter * 10f64.powi(k as i32)));
    }
    for j in attempts {
        if let Some(lower) = factor(sigma, j) {
            return Ok(CholeskyFactor {
                lower,
                jitter_applied: j,
            });
        }
    }
    let m = DMatrix::from_row_slice(n, n, sigma.data());
    let min_eigenvalue = m.symmetric_eigenvalues().min();
    Err(CilError::Numerical {
        message: format!("cholesky failed with jitter up to {:e}", jitter * 1e6),
        min_eigenvalue,
    })
}

fn factor(sigma: &Tensor, jitter: f64) -> Option<Tensor> {
    let n = sigma.rows();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = sigma.get(i, j) + if i == j { jitter } else { 0.0 };
            s -= dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], l).ok()
}

/// Draws `count` rows from `N(mean, L·Lᵀ)`.
pub fn sample_gaussian(rng: &mut Rng, mean: &[f64], lower: &Tensor, count: usize) -> Result<Tensor> {
    let d = mean.len();
    if lower.shape() != [d, d] {
        return Err(CilError::dim("sample_gaussian", &[d], lower.shape()));
    }
    if !lower.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(CilError::Degenerate("sample_gaussian input is not finite".into()));
    }
    let mut out = Vec::with_capacity(count * d);
    let mut z = vec![0.0; d];
    for _ in 0..count {
        z.iter_mut().for_each(|v| *v = rng.normal());
        for i in 0..d {
            out.push(mean[i] + dot(&lower.row(i)[..=i], &z[..=i]));
        }
    }
    Tensor::new(vec![count, d], out)
}

/// Column means and unbiased covariance of the rows of `x` (zero covariance for one row).
pub fn mean_and_covariance(x: &Tensor) -> (Vec<f64>, Tensor) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    if n > 1 {
        let mut c = vec![0.0; d];
        for i in 0..n {
            c.iter_mut().zip(x.row(i)).zip(&mean).for_each(|((c, v), m)| *c = v - m);
            for a in 0..d {
                if c[a] == 0.0 {
                    continue;
                }
                for b in a..d {
                    cov[a * d + b] += c[a] * c[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                let v = cov[a * d + b] / (n - 1) as f64;
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
        }
    }
    (mean, Tensor::new(vec![d, d], cov).expect("square"))
}
