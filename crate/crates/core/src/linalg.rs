//! Dense kernels for the small symmetric matrices that describe Gaussian
//! components.
//!
//! Matrices are stored row-major in flat slices of length `d * d`. Covariance
//! matrices are small (typically `d <= 3`), so everything here is written for
//! clarity and numerical robustness rather than cache behaviour.

use crate::error::{Error, Result};

/// Initial relative regularization added to the diagonal of a covariance that
/// fails to factorize, scaled by `trace / d`.
pub const REGULARIZATION_EPS: f64 = 1e-9;
/// Growth factor between regularization attempts.
pub const REGULARIZATION_GROWTH: f64 = 100.0;
/// Number of regularized retries after the plain factorization fails.
pub const REGULARIZATION_RETRIES: usize = 3;
/// Largest accepted `||S * S^-1 - I||_inf` for a factorization.
pub const INVERSE_TOLERANCE: f64 = 1e-8;

/// Result of inverting a symmetric positive-definite matrix through its
/// Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyInverse {
    /// Matrix that was actually factorized (input plus any regularization).
    pub matrix: Vec<f64>,
    /// Lower-triangular factor `L` with `matrix = L L^T`.
    pub factor: Vec<f64>,
    pub inverse: Vec<f64>,
    pub log_det: f64,
    /// Amount added to every diagonal entry, zero when none was needed.
    pub regularization: f64,
}

/// Plain Cholesky factorization. Returns `None` if the matrix is not
/// numerically positive definite.
pub fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), d * d);
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn invert_lower(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    for col in 0..d {
        inv[col * d + col] = 1.0 / l[col * d + col];
        for i in (col + 1)..d {
            let mut sum = 0.0;
            for k in col..i {
                sum -= l[i * d + k] * inv[k * d + col];
            }
            inv[i * d + col] = sum / l[i * d + i];
        }
    }
    inv
}

fn inverse_from_factor(l: &[f64], d: usize) -> Vec<f64> {
    let li = invert_lower(l, d);
    // S^-1 = L^-T L^-1
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = 0.0;
            for k in i..d {
                sum += li[k * d + i] * li[k * d + j];
            }
            inv[i * d + j] = sum;
            inv[j * d + i] = sum;
        }
    }
    inv
}

/// `||a * b - I||_inf` (maximum absolute row sum).
pub fn identity_residual(a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            let mut sum = 0.0;
            for k in 0..d {
                sum += a[i * d + k] * b[k * d + j];
            }
            if i == j {
                sum -= 1.0;
            }
            row += sum.abs();
        }
        worst = worst.max(row);
    }
    worst
}

fn try_factor(a: &[f64], d: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let l = cholesky(a, d)?;
    let inv = inverse_from_factor(&l, d);
    if identity_residual(a, &inv, d) < INVERSE_TOLERANCE {
        Some((l, inv))
    } else {
        None
    }
}

/// Inverts a symmetric matrix and returns its log-determinant.
///
/// When the factorization fails, `eps * trace / d` is added to the diagonal
/// with `eps` starting at [`REGULARIZATION_EPS`] and growing by
/// [`REGULARIZATION_GROWTH`] for up to [`REGULARIZATION_RETRIES`] attempts.
pub fn cholesky_invert(cov: &[f64], d: usize) -> Result<CholeskyInverse> {
    if d == 0 || cov.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            actual: cov.len(),
        });
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    let mut matrix = symmetrize(cov, d);
    let mut regularization = 0.0;
    let mut factored = try_factor(&matrix, d);
    if factored.is_none() {
        let trace: f64 = (0..d).map(|i| matrix[i * d + i]).sum();
        if !(trace > 0.0) {
            return Err(Error::SingularCovariance);
        }
        let base = symmetrize(cov, d);
        let mut eps = REGULARIZATION_EPS;
        for _ in 0..REGULARIZATION_RETRIES {
            regularization = eps * trace / d as f64;
            matrix = base.clone();
            for i in 0..d {
                matrix[i * d + i] += regularization;
            }
            factored = try_factor(&matrix, d);
            if factored.is_some() {
                break;
            }
            eps *= REGULARIZATION_GROWTH;
        }
    }
    let (factor, inverse) = factored.ok_or(Error::SingularCovariance)?;
    let log_det = 2.0 * (0..d).map(|i| factor[i * d + i].ln()).sum::<f64>();
    Ok(CholeskyInverse {
        matrix,
        factor,
        inverse,
        log_det,
        regularization,
    })
}

fn symmetrize(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = a.to_vec();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (a[i * d + j] + a[j * d + i]);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    out
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector for `values[i]`.
    pub vectors: Vec<Vec<f64>>,
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigenvalue algorithm.
///
/// Converges for every symmetric input; each rotation is computed with the
/// small-angle formulation so that nearly diagonal matrices stay accurate.
pub fn symmetric_eigen(a: &[f64], d: usize) -> SymmetricEigen {
    assert_eq!(a.len(), d * d, "symmetric_eigen: expected a {d}x{d} matrix");
    let mut m = symmetrize(a, d);
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = frob * f64::EPSILON * 1e-2;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off <= threshold || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // A <- J^T A J, with J the rotation in the (p, q) plane.
                for k in 0..d {
                    let akp = m[k * d + p];
                    let akq = m[k * d + q];
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = m[p * d + k];
                    let aqk = m[q * d + k];
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
                m[p * d + q] = 0.0;
                m[q * d + p] = 0.0;

                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j * d + j].total_cmp(&m[i * d + i]).then(i.cmp(&j)));
    SymmetricEigen {
        values: order.iter().map(|&i| m[i * d + i]).collect(),
        vectors: order
            .iter()
            .map(|&i| (0..d).map(|k| v[k * d + i]).collect())
            .collect(),
    }
}

/// `x^T A x` for a flat row-major `A`.
#[inline]
pub fn quad_form(a: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut sum = 0.0;
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * x[j];
        }
        sum += x[i] * acc;
    }
    sum
}

/// `x^T A y` for a flat row-major `A`.
#[inline]
pub fn bilinear_form(a: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut sum = 0.0;
    for i in 0..d {
        let row = &a[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * y[j];
        }
        sum += x[i] * acc;
    }
    sum
}

/// Packs the lower triangle (row by row) of a symmetric matrix.
pub fn pack_lower(a: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(a[i * d + j]);
        }
    }
    out
}

/// Expands a packed lower triangle to a full symmetric matrix.
pub fn unpack_lower(packed: &[f64], d: usize) -> Result<Vec<f64>> {
    if packed.len() != d * (d + 1) / 2 {
        return Err(Error::DimensionMismatch {
            expected: d * (d + 1) / 2,
            actual: packed.len(),
        });
    }
    let mut out = vec![0.0; d * d];
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            out[i * d + j] = packed[idx];
            out[j * d + i] = packed[idx];
            idx += 1;
        }
    }
    Ok(out)
}
