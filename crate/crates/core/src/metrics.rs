//! Goodness-of-fit metrics and Mahalanobis outlier ranking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::Samples;
use crate::gmm::{std_normal_cdf, std_normal_pdf, Gmm};
use crate::summary::{ClusterSummary, SubsetKey, Summary};

/// How far beyond the model's widest component the integration domain
/// extends, in standard deviations.
pub const DOMAIN_SIGMAS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdf {
    sorted: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("empirical CDF needs at least one sample"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("empirical CDF samples must be finite"));
        }
        values.sort_by(f64::total_cmp);
        Ok(EmpiricalCdf { sorted: values })
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted
    }

    /// Fraction of samples `<= x`.
    pub fn eval(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v <= x) as f64 / self.sorted.len() as f64
    }
}

/// One-dimensional mixture CDF with its antiderivative.
struct MixtureCdf<'a> {
    gmm: &'a Gmm,
    sigmas: Vec<f64>,
}

impl MixtureCdf<'_> {
    fn cdf(&self, x: f64) -> f64 {
        self.gmm
            .components()
            .iter()
            .zip(&self.sigmas)
            .map(|(g, s)| g.weight() * std_normal_cdf((x - g.mean()[0]) / s))
            .sum()
    }

    fn pdf(&self, x: f64) -> f64 {
        self.gmm
            .components()
            .iter()
            .zip(&self.sigmas)
            .map(|(g, s)| g.weight() * std_normal_pdf((x - g.mean()[0]) / s) / s)
            .sum()
    }

    /// `int F` with `d/dx [(x - mu) Phi(z) + sigma phi(z)] = Phi(z)`.
    fn antiderivative(&self, x: f64) -> f64 {
        self.gmm
            .components()
            .iter()
            .zip(&self.sigmas)
            .map(|(g, s)| {
                let dx = x - g.mean()[0];
                let z = dx / s;
                g.weight() * (dx * std_normal_cdf(z) + s * std_normal_pdf(z))
            })
            .sum()
    }

    /// `int_p^q (1 - F)`, written so large arguments do not cancel.
    fn upper_tail_integral(&self, p: f64, q: f64) -> f64 {
        // 1 - Phi(z) = Phi(-z), so int (1 - Phi(z)) dx = -[(mu - x) Phi(-z) + sigma phi(z)].
        self.gmm
            .components()
            .iter()
            .zip(&self.sigmas)
            .map(|(g, s)| {
                let f = |x: f64| {
                    let dx = x - g.mean()[0];
                    let z = dx / s;
                    -dx * std_normal_cdf(-z) + s * std_normal_pdf(z)
                };
                g.weight() * (f(p) - f(q))
            })
            .sum()
    }

    /// `x` in `[p, q]` with `F(x) = c`, given `F(p) < c < F(q)`.
    fn solve(&self, c: f64, mut p: f64, mut q: f64, mut fp: f64, mut fq: f64) -> f64 {
        let mut x = p + (c - fp) / (fq - fp) * (q - p);
        for _ in 0..60 {
            let fx = self.cdf(x);
            if fx == c {
                return x;
            }
            if fx < c {
                p = x;
                fp = fx;
            } else {
                q = x;
                fq = fx;
            }
            let d = self.pdf(x);
            let mut next = x - (fx - c) / d;
            if !(next > p && next < q) {
                next = if fq > fp {
                    p + (c - fp) / (fq - fp) * (q - p)
                } else {
                    0.5 * (p + q)
                };
                if !(next > p && next < q) {
                    next = 0.5 * (p + q);
                }
            }
            if (next - x).abs() <= 1e-15 * (x.abs() + (q - p)) || q - p <= f64::EPSILON * x.abs() {
                return next;
            }
            x = next;
        }
        x
    }

    /// `int_p^q |c - F(x)| dx` for a constant level `c`.
    fn abs_gap(&self, c: f64, p: f64, q: f64) -> f64 {
        if q <= p {
            return 0.0;
        }
        let (fp, fq) = (self.cdf(p), self.cdf(q));
        // F - c is monotone, so it changes sign at most once.
        if fq <= c {
            self.below(c, p, q)
        } else if fp >= c {
            self.above(c, p, q)
        } else {
            let x = self.solve(c, p, q, fp, fq);
            self.below(c, p, x) + self.above(c, x, q)
        }
    }

    /// `int_p^q (c - F)` where `F <= c`.
    fn below(&self, c: f64, p: f64, q: f64) -> f64 {
        (c * (q - p) - (self.antiderivative(q) - self.antiderivative(p))).max(0.0)
    }

    /// `int_p^q (F - c)` where `F >= c`.
    fn above(&self, c: f64, p: f64, q: f64) -> f64 {
        ((1.0 - c) * (q - p) - self.upper_tail_integral(p, q)).max(0.0)
    }
}

/// `int |F_data - F_GMM| dx`, integrated exactly on each step of the
/// empirical CDF using the closed-form antiderivative of the normal CDF.
pub fn wasserstein_1d(ecdf: &EmpiricalCdf, gmm: &Gmm) -> Result<f64> {
    if gmm.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: gmm.dim(),
        });
    }
    let mix = MixtureCdf {
        gmm,
        sigmas: gmm.components().iter().map(|g| g.variance(0).sqrt()).collect(),
    };
    let (env_lo, env_hi) = gmm.envelope(0, DOMAIN_SIGMAS);
    let values = ecdf.values();
    let n = values.len();
    let lo = env_lo.min(values[0]);
    let hi = env_hi.max(values[n - 1]);

    let mut total = mix.abs_gap(0.0, lo, values[0]);
    let mut i = 0;
    while i < n {
        // advance over ties so each level is the CDF value right of the jump
        let mut j = i + 1;
        while j < n && values[j] == values[i] {
            j += 1;
        }
        let level = j as f64 / n as f64;
        let next = if j < n { values[j] } else { hi };
        total += mix.abs_gap(level, values[i], next);
        i = j;
    }
    Ok(total)
}

/// `min_j sqrt((x - mu_j)^T Sigma_j^-1 (x - mu_j))` for every row.
pub fn outlier_scores(samples: Samples<'_>, gmm: &Gmm) -> Result<Vec<f64>> {
    if samples.dim() != gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            actual: samples.dim(),
        });
    }
    Ok(samples
        .rows()
        .map(|x| {
            gmm.components()
                .iter()
                .map(|g| g.mahalanobis_sq_unchecked(x))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

/// Row indices ordered by descending outlier score, ties by ascending index.
pub fn rank_outliers(samples: Samples<'_>, gmm: &Gmm) -> Result<Vec<usize>> {
    let scores = outlier_scores(samples, gmm)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Number of outliers kept for a fraction `p` of `count` samples.
pub fn outlier_count(p: f64, count: usize) -> usize {
    ((p * count as f64).ceil() as usize).min(count)
}

/// The first `ceil(p |C|)` entries of the cluster's outlier ranking for
/// the given 3D key.
pub fn take_outliers(cluster: &ClusterSummary, key: &SubsetKey, p: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("outlier fraction {p} outside [0, 1]")));
    }
    let order = cluster
        .outlier_order
        .get(key)
        .ok_or_else(|| Error::MissingKey(format!("outlier ranking for {key}")))?;
    Ok(order[..outlier_count(p, cluster.count).min(order.len())].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterErrors {
    pub cluster: usize,
    pub count: usize,
    /// Per linear dimension; `None` where no 1D model is stored.
    pub wasserstein: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub dims: Vec<String>,
    pub clusters: Vec<ClusterErrors>,
    /// Mean over clusters, per dimension.
    pub mean_per_dim: Vec<Option<f64>>,
}

pub fn error_report(summary: &Summary) -> ErrorReport {
    let dims = summary.dim_names();
    let clusters: Vec<ClusterErrors> = summary
        .clusters
        .iter()
        .map(|c| ClusterErrors {
            cluster: c.id,
            count: c.count,
            wasserstein: (0..dims.len()).map(|d| c.wasserstein.get(&d).copied()).collect(),
        })
        .collect();
    let mean_per_dim = (0..dims.len())
        .map(|d| {
            let vals: Vec<f64> = clusters.iter().filter_map(|c| c.wasserstein[d]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    ErrorReport {
        dims,
        clusters,
        mean_per_dim,
    }
}

impl ErrorReport {
    /// `cluster,count,<dim>...` with one row per cluster.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cluster,count");
        for d in &self.dims {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for c in &self.clusters {
            out.push_str(&format!("{},{}", c.cluster, c.count));
            for w in &c.wasserstein {
                out.push(',');
                if let Some(w) = w {
                    out.push_str(&w.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}
