//! Gaussian components and Gaussian mixture models.

use std::f64::consts::{PI, SQRT_2};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyInverse};

/// Tolerance on the weight normalization of a [`Gmm`].
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Density of `N(mean, var)` at `x`.
#[inline]
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    (-0.5 * d * d / var).exp() / (2.0 * PI * var).sqrt()
}

/// A single weighted multivariate Gaussian with cached inverse covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    factor: Vec<f64>,
    inverse: Vec<f64>,
    log_det: f64,
    log_norm: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    /// Builds a component from a full row-major covariance. Covariances that
    /// are not numerically positive definite are regularized.
    pub fn new(weight: f64, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("gaussian must have at least one dimension"));
        }
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                actual: cov.len(),
            });
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian weight must be positive, got {weight}"
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gaussian mean must be finite"));
        }
        let CholeskyInverse {
            matrix,
            factor,
            inverse,
            log_det,
            ..
        } = linalg::cholesky_invert(&cov, d)?;
        Ok(Gaussian {
            weight,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
            mean,
            cov: matrix,
            factor,
            inverse,
            log_det,
        })
    }

    /// Builds a component from a packed lower-triangular covariance.
    pub fn from_packed(weight: f64, mean: Vec<f64>, cov_lower: &[f64]) -> Result<Self> {
        let cov = linalg::unpack_lower(cov_lower, mean.len())?;
        Self::new(weight, mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Full row-major covariance (after any regularization).
    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    pub fn cov_lower(&self) -> Vec<f64> {
        linalg::pack_lower(&self.cov, self.dim())
    }

    pub fn inverse(&self) -> &[f64] {
        &self.inverse
    }

    /// Lower Cholesky factor of the covariance.
    pub fn factor(&self) -> &[f64] {
        &self.factor
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov[i * self.dim() + i]
    }

    pub(crate) fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Squared Mahalanobis distance of `x` to the mean.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.mahalanobis_sq_unchecked(x))
    }

    #[inline]
    pub(crate) fn mahalanobis_sq_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut diff = [0.0; 8];
        if d <= diff.len() {
            for i in 0..d {
                diff[i] = x[i] - self.mean[i];
            }
            linalg::quad_form(&self.inverse, &diff[..d])
        } else {
            let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
            linalg::quad_form(&self.inverse, &diff)
        }
    }

    /// Unweighted log-density.
    #[inline]
    pub(crate) fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq_unchecked(x)
    }

    /// Unweighted density `|2 pi S|^{-1/2} exp(-(x-m)^T S^-1 (x-m) / 2)`.
    pub fn density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.log_density_unchecked(x).exp())
    }

    /// Marginal over the listed dimensions, keeping the weight.
    pub fn marginal(&self, dims: &[usize]) -> Result<Gaussian> {
        let d = self.dim();
        if let Some(&bad) = dims.iter().find(|&&i| i >= d) {
            return Err(Error::InvalidDimension { dim: bad, m: d });
        }
        let mean = dims.iter().map(|&i| self.mean[i]).collect();
        let cov = dims
            .iter()
            .flat_map(|&i| dims.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.cov[i * d + j])
            .collect();
        Gaussian::new(self.weight, mean, cov)
    }
}

/// A weighted sum of Gaussians sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    dim: usize,
    components: Vec<Gaussian>,
}

impl Gmm {
    /// Builds a mixture and normalizes the component weights to sum to one.
    pub fn new(components: Vec<Gaussian>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("a mixture needs at least one component"))?;
        let dim = first.dim();
        if let Some(bad) = components.iter().find(|g| g.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.dim(),
            });
        }
        let total: f64 = components.iter().map(|g| g.weight).sum();
        let components = components
            .into_iter()
            .map(|g| {
                let w = g.weight / total;
                g.with_weight(w)
            })
            .collect();
        Ok(Gmm { dim, components })
    }

    /// Single-component mixture.
    pub fn single(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        Gmm::new(vec![Gaussian::new(1.0, mean, cov)?])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        Ok(self.density_unchecked(x))
    }

    #[inline]
    pub(crate) fn density_unchecked(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|g| g.weight * g.log_density_unchecked(x).exp())
            .sum()
    }

    /// Log-likelihood of one point, computed with log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x.len(),
            });
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|g| g.weight.ln() + g.log_density_unchecked(x))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    fn require_1d(&self) -> Result<()> {
        if self.dim != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                actual: self.dim,
            });
        }
        Ok(())
    }

    /// CDF of a one-dimensional mixture.
    pub fn cdf_1d(&self, x: f64) -> Result<f64> {
        self.require_1d()?;
        Ok(self.cdf_1d_unchecked(x))
    }

    #[inline]
    pub(crate) fn cdf_1d_unchecked(&self, x: f64) -> f64 {
        let v: f64 = self
            .components
            .iter()
            .map(|g| g.weight * std_normal_cdf((x - g.mean[0]) / g.cov[0].sqrt()))
            .sum();
        v.clamp(0.0, 1.0)
    }

    /// Mean and variance of a one-dimensional mixture.
    pub fn moments_1d(&self) -> Result<(f64, f64)> {
        self.require_1d()?;
        let mean: f64 = self.components.iter().map(|g| g.weight * g.mean[0]).sum();
        let second: f64 = self
            .components
            .iter()
            .map(|g| g.weight * (g.cov[0] + g.mean[0] * g.mean[0]))
            .sum();
        Ok((mean, second - mean * mean))
    }

    /// Smallest and largest `mean -/+ n_sigma * sd` over all components of
    /// dimension `axis`.
    pub fn envelope(&self, axis: usize, n_sigma: f64) -> (f64, f64) {
        let d = self.dim;
        self.components.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), g| {
                let sd = g.cov[axis * d + axis].sqrt();
                (
                    lo.min(g.mean[axis] - n_sigma * sd),
                    hi.max(g.mean[axis] + n_sigma * sd),
                )
            },
        )
    }

    /// Marginal mixture over the listed dimensions.
    pub fn marginal(&self, dims: &[usize]) -> Result<Gmm> {
        let comps = self
            .components
            .iter()
            .map(|g| g.marginal(dims))
            .collect::<Result<Vec<_>>>()?;
        Gmm::new(comps)
    }

    /// Draws `n` samples: component by weight, then `mean + L z`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chooser = WeightedIndex::new(self.components.iter().map(|g| g.weight))
            .expect("mixture weights are positive");
        let d = self.dim;
        let mut z = vec![0.0; d];
        (0..n)
            .map(|_| {
                let g = &self.components[chooser.sample(&mut rng)];
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                (0..d)
                    .map(|i| {
                        g.mean[i]
                            + (0..=i)
                                .map(|k| g.factor[i * d + k] * z[k])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    /// Rounds every parameter to `f32` precision, re-regularizing until the
    /// stored covariances are exactly representable in the on-disk format.
    ///
    /// Weights are snapped to multiples of 2^-24 that sum to exactly one, so
    /// they survive an `f32` round trip and renormalization unchanged.
    pub fn quantized(&self) -> Result<Gmm> {
        let round = |v: f64| v as f32 as f64;
        let weights = snap_weights(&self.components.iter().map(|g| g.weight).collect::<Vec<_>>());
        let mut comps = Vec::with_capacity(self.components.len());
        for (g, weight) in self.components.iter().zip(weights) {
            let mean: Vec<f64> = g.mean.iter().map(|&v| round(v)).collect();
            let mut cov: Vec<f64> = g.cov.iter().map(|&v| round(v)).collect();
            let mut q = Gaussian::new(weight, mean.clone(), cov.clone())?;
            for _ in 0..4 {
                if q.cov == cov {
                    break;
                }
                cov = q.cov.iter().map(|&v| round(v)).collect();
                q = Gaussian::new(weight, mean.clone(), cov.clone())?;
            }
            comps.push(q);
        }
        Gmm::new(comps)
    }
}

const WEIGHT_QUANTUM: f64 = (1u64 << 24) as f64;

/// Largest-remainder rounding of normalized weights onto the 2^-24 grid,
/// keeping every weight at least one quantum.
fn snap_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let scaled: Vec<f64> = weights.iter().map(|w| w / total * WEIGHT_QUANTUM).collect();
    let mut units: Vec<i64> = scaled.iter().map(|s| (s.floor() as i64).max(1)).collect();
    let mut deficit = WEIGHT_QUANTUM as i64 - units.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut i = 0;
    while deficit > 0 {
        units[order[i % order.len()]] += 1;
        deficit -= 1;
        i += 1;
    }
    while deficit < 0 {
        let largest = (0..units.len()).max_by_key(|&k| (units[k], std::cmp::Reverse(k))).unwrap();
        units[largest] -= 1;
        deficit += 1;
    }
    units.into_iter().map(|u| u as f64 / WEIGHT_QUANTUM).collect()
}
