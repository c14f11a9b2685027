//! Expectation-maximization fitting of Gaussian mixtures and BIC-driven
//! selection of the component count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::kmeans;
use crate::error::{Error, Result};
use crate::gmm::{Gaussian, Gmm};
use crate::seed;

/// How many free parameters the mixture weights contribute to the BIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightParams {
    /// `K - 1`: the dimension of the weight simplex.
    #[default]
    Simplex,
    /// `d - 1`, as printed in some formulations of the count.
    DimensionMinusOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_components: usize,
    pub subsample_size: usize,
    pub em_max_iters: usize,
    /// Relative log-likelihood change below which EM stops.
    pub em_tol: f64,
    /// Clusters with at most this many samples get a single Gaussian.
    pub tiny_cluster_threshold: usize,
    pub restarts: usize,
    pub seed: u64,
    pub weight_params: WeightParams,
    /// Rank each cluster's samples by outlier score while building.
    pub rank_outliers: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_components: 6,
            subsample_size: 200,
            em_max_iters: 200,
            em_tol: 1e-6,
            tiny_cluster_threshold: 20,
            restarts: 3,
            seed: 0,
            weight_params: WeightParams::Simplex,
            rank_outliers: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_components == 0
            || self.subsample_size == 0
            || self.em_max_iters == 0
            || self.tiny_cluster_threshold == 0
            || self.restarts == 0
            || !(self.em_tol > 0.0)
        {
            return Err(Error::invalid("fit configuration values must be positive"));
        }
        if self.subsample_size < self.tiny_cluster_threshold {
            return Err(Error::invalid(
                "subsample size must be at least the tiny-cluster threshold",
            ));
        }
        Ok(())
    }

    /// Copy of this configuration with a different seed.
    pub fn with_seed(&self, seed: u64) -> FitConfig {
        FitConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Borrowed row-major `n x d` sample matrix.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Samples<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(Samples { data, dim })
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [f64]> {
        self.data.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub gmm: Gmm,
    pub log_likelihood: f64,
    pub bic: f64,
    /// `(K, bic)` for every component count evaluated during selection.
    pub k_search_trace: Vec<(usize, f64)>,
    /// Log-likelihood after each E-step of the winning EM run.
    pub log_likelihood_trace: Vec<f64>,
    /// Trace indices at which a starved component was removed; the
    /// likelihood is only guaranteed monotone between these points.
    pub component_drops: Vec<usize>,
    /// Set when the input could not support the requested component count
    /// (all samples identical).
    pub degenerate: bool,
}

/// `K (d(d+1)/2 + d) + (K - 1)`.
pub fn free_parameter_count(k: usize, d: usize) -> usize {
    free_parameter_count_with(k, d, WeightParams::Simplex)
}

pub fn free_parameter_count_with(k: usize, d: usize, weights: WeightParams) -> usize {
    let per_component = d * (d + 1) / 2 + d;
    let weight_terms = match weights {
        WeightParams::Simplex => k - 1,
        WeightParams::DimensionMinusOne => d - 1,
    };
    k * per_component + weight_terms
}

/// `-2 L + q ln n`; lower is better.
pub fn bic(log_likelihood: f64, k: usize, d: usize, n: usize) -> f64 {
    bic_with(log_likelihood, k, d, n, WeightParams::Simplex)
}

pub fn bic_with(log_likelihood: f64, k: usize, d: usize, n: usize, weights: WeightParams) -> f64 {
    -2.0 * log_likelihood + free_parameter_count_with(k, d, weights) as f64 * (n as f64).ln()
}

/// Lower and upper component bounds for a multi-dimensional subset from the
/// selected one-dimensional counts: the minimum and the product, the latter
/// clamped to `max_components^2`.
pub fn component_bounds(
    one_d_counts: &std::collections::BTreeMap<usize, usize>,
    dims: &[usize],
    max_components: usize,
) -> Result<(usize, usize)> {
    let mut k_min = usize::MAX;
    let mut k_max = 1usize;
    for d in dims {
        let k = *one_d_counts
            .get(d)
            .ok_or_else(|| Error::MissingKey(format!("1D component count for dimension {d}")))?;
        k_min = k_min.min(k.max(1));
        k_max = k_max.saturating_mul(k.max(1));
    }
    if dims.is_empty() {
        return Err(Error::invalid("component bounds need at least one dimension"));
    }
    let clamp = max_components.saturating_mul(max_components).max(1);
    let k_max = k_max.min(clamp).max(k_min);
    Ok((k_min, k_max))
}

/// Per-dimension variance floor `(1e-6 * range)^2`.
fn variance_floor(samples: Samples<'_>) -> Vec<f64> {
    (0..samples.dim)
        .map(|j| {
            let (lo, hi) = samples
                .rows()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[j]), hi.max(r[j]))
                });
            let range = hi - lo;
            let scale = if range > 0.0 {
                range
            } else {
                lo.abs().max(1.0)
            };
            (1e-6 * scale).powi(2)
        })
        .collect()
}

struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
}

/// Weighted mean and ML covariance of the rows, with weights `resp[i]`.
fn weighted_moments(samples: Samples<'_>, resp: impl Fn(usize) -> f64, total: f64, floor: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = samples.dim;
    let n = samples.n();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        let r = resp(i);
        if r != 0.0 {
            let row = samples.row(i);
            for j in 0..d {
                mean[j] += r * row[j];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let r = resp(i);
        if r != 0.0 {
            let row = samples.row(i);
            for j in 0..d {
                diff[j] = row[j] - mean[j];
            }
            for a in 0..d {
                for b in 0..=a {
                    cov[a * d + b] += r * diff[a] * diff[b];
                }
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = cov[a * d + b] / total;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
        cov[a * d + a] = cov[a * d + a].max(floor[a]);
    }
    (mean, cov)
}

struct EmRun {
    gmm: Gmm,
    log_likelihood: f64,
    trace: Vec<f64>,
    drops: Vec<usize>,
}

fn build_gmm(components: &[Component]) -> Result<Gmm> {
    Gmm::new(
        components
            .iter()
            .map(|c| Gaussian::new(c.weight, c.mean.clone(), c.cov.clone()))
            .collect::<Result<Vec<_>>>()?,
    )
}

/// Initial parameters from k-means++ seeding refined by a few Lloyd steps.
fn initial_components(samples: Samples<'_>, k: usize, seed: u64, floor: &[f64]) -> Result<Vec<Component>> {
    let n = samples.n();
    if k == 1 {
        let (mean, cov) = weighted_moments(samples, |_| 1.0, n as f64, floor);
        return Ok(vec![Component {
            weight: 1.0,
            mean,
            cov,
        }]);
    }
    let km = kmeans::kmeans(samples.data, samples.dim, k, seed, 10)?;
    let (global_mean, global_cov) = weighted_moments(samples, |_| 1.0, n as f64, floor);
    let mut comps = Vec::with_capacity(k);
    for c in 0..k {
        let count = km.labels.iter().filter(|&&l| l == c).count();
        if count > samples.dim {
            let (mean, cov) =
                weighted_moments(samples, |i| if km.labels[i] == c { 1.0 } else { 0.0 }, count as f64, floor);
            comps.push(Component {
                weight: count as f64 / n as f64,
                mean,
                cov,
            });
        } else {
            let mean = if count > 0 {
                km.centers[c * samples.dim..(c + 1) * samples.dim].to_vec()
            } else {
                global_mean.clone()
            };
            comps.push(Component {
                weight: count.max(1) as f64 / n as f64,
                mean,
                cov: global_cov.clone(),
            });
        }
    }
    Ok(comps)
}

fn em_single(samples: Samples<'_>, k: usize, seed: u64, config: &FitConfig, floor: &[f64]) -> Result<EmRun> {
    let n = samples.n();
    let d = samples.dim;
    let mut comps = initial_components(samples, k, seed, floor)?;
    let mut gmm = build_gmm(&comps)?;
    let mut trace = Vec::new();
    let mut drops = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut log_terms = vec![0.0; k];

    loop {
        let kk = gmm.len();
        let log_weights: Vec<f64> = gmm.components().iter().map(|g| g.weight().ln()).collect();

        // E-step
        let mut ll = 0.0;
        for i in 0..n {
            let x = samples.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, g) in gmm.components().iter().enumerate() {
                let t = log_weights[j] + g.log_density_unchecked(x);
                log_terms[j] = t;
                max = max.max(t);
            }
            let mut sum = 0.0;
            for t in &log_terms[..kk] {
                sum += (t - max).exp();
            }
            let lse = max + sum.ln();
            ll += lse;
            let r = &mut resp[i * kk..(i + 1) * kk];
            for j in 0..kk {
                r[j] = (log_terms[j] - lse).exp();
            }
        }

        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= config.em_tol * ll.abs());
        trace.push(ll);
        if converged || trace.len() >= config.em_max_iters || kk == 1 && trace.len() > 1 {
            return Ok(EmRun {
                gmm,
                log_likelihood: ll,
                trace,
                drops,
            });
        }

        // M-step
        let mut next = Vec::with_capacity(kk);
        for j in 0..kk {
            let nk: f64 = (0..n).map(|i| resp[i * kk + j]).sum();
            // A component carrying less than d + 1 samples' worth of mass
            // cannot support a full covariance.
            if nk < (d + 1) as f64 {
                continue;
            }
            let (mean, cov) = weighted_moments(samples, |i| resp[i * kk + j], nk, floor);
            next.push(Component {
                weight: nk / n as f64,
                mean,
                cov,
            });
        }
        if next.is_empty() {
            let (mean, cov) = weighted_moments(samples, |_| 1.0, n as f64, floor);
            next.push(Component {
                weight: 1.0,
                mean,
                cov,
            });
        }
        if next.len() < kk {
            drops.push(trace.len());
        }
        comps = next;
        gmm = build_gmm(&comps)?;
    }
}

/// Fits a `k`-component mixture by EM, keeping the best of
/// `config.restarts` runs by final log-likelihood.
pub fn fit_em(samples: Samples<'_>, k: usize, seed: u64, config: &FitConfig) -> Result<FitResult> {
    let n = samples.n();
    if k == 0 {
        return Err(Error::invalid("component count must be positive"));
    }
    if n < k {
        return Err(Error::invalid(format!(
            "cannot fit {k} components to {n} samples"
        )));
    }
    let first = samples.row(0);
    let identical = samples.rows().all(|r| r == first);
    let (k, degenerate) = if identical && k > 1 { (1, true) } else { (k, false) };
    let floor = variance_floor(samples);

    let restarts = if k == 1 { 1 } else { config.restarts };
    let mut best: Option<EmRun> = None;
    for r in 0..restarts {
        let run = em_single(samples, k, seed::derive(seed, &[r as u64]), config, &floor)?;
        if best
            .as_ref()
            .is_none_or(|b| run.log_likelihood > b.log_likelihood)
        {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let kk = best.gmm.len();
    let score = bic_with(best.log_likelihood, kk, samples.dim, n, config.weight_params);
    Ok(FitResult {
        gmm: best.gmm,
        log_likelihood: best.log_likelihood,
        bic: score,
        k_search_trace: vec![(k, score)],
        log_likelihood_trace: best.trace,
        component_drops: best.drops,
        degenerate,
    })
}

/// Chooses the component count in `k_range` by BIC on a random subsample,
/// then refits the winner on all samples.
///
/// Clusters of at most `tiny_cluster_threshold` samples always get a single
/// Gaussian. Seeds derive from `config.seed` and the component count only,
/// so overlapping ranges evaluate identical candidate fits.
pub fn select_components(samples: Samples<'_>, k_range: (usize, usize), config: &FitConfig) -> Result<FitResult> {
    let n = samples.n();
    if n == 0 {
        return Err(Error::invalid("cannot fit a mixture to zero samples"));
    }
    if n <= config.tiny_cluster_threshold {
        return fit_em(samples, 1, seed::derive(config.seed, &[1]), config);
    }

    let d = samples.dim;
    let sub_n = n.min(config.subsample_size);
    let sub_data: Vec<f64>;
    let sub = if sub_n < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[u64::MAX]));
        let mut idx = rand::seq::index::sample(&mut rng, n, sub_n).into_vec();
        idx.sort_unstable();
        sub_data = idx.iter().flat_map(|&i| samples.row(i).iter().copied()).collect();
        Samples::new(&sub_data, d)?
    } else {
        samples
    };

    let k_lo = k_range.0.max(1).min(sub_n);
    let k_hi = k_range.1.max(k_lo).min(sub_n);
    let mut trace = Vec::with_capacity(k_hi - k_lo + 1);
    let mut best: Option<(usize, FitResult)> = None;
    for k in k_lo..=k_hi {
        let fit = fit_em(sub, k, seed::derive(config.seed, &[k as u64]), config)?;
        trace.push((k, fit.bic));
        if best.as_ref().is_none_or(|(_, b)| fit.bic < b.bic) {
            best = Some((k, fit));
        }
    }
    let (k_best, sub_fit) = best.expect("non-empty component range");

    let mut result = if sub_n == n {
        sub_fit
    } else {
        fit_em(samples, k_best, seed::derive(config.seed, &[k_best as u64, 1]), config)?
    };
    result.k_search_trace = trace;
    Ok(result)
}
