use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Clustering, Dataset};
use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    /// Row-major `k x d` centers.
    pub centers: Vec<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

#[inline]
fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: each new center is drawn with probability
/// proportional to the squared distance to the nearest chosen center.
pub(crate) fn kmeans_plus_plus(points: &[f64], d: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len() / d;
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&points[first * d..(first + 1) * d]);
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| dist_sq(&points[i * d..(i + 1) * d], &centers[..d]))
        .collect();
    for c in 1..k {
        let next = match WeightedIndex::new(&nearest) {
            Ok(w) => w.sample(rng),
            // every remaining distance is zero (duplicate points)
            Err(_) => rng.random_range(0..n),
        };
        centers.extend_from_slice(&points[next * d..(next + 1) * d]);
        let center = &centers[c * d..(c + 1) * d];
        for (i, best) in nearest.iter_mut().enumerate() {
            let dd = dist_sq(&points[i * d..(i + 1) * d], center);
            if dd < *best {
                *best = dd;
            }
        }
    }
    centers
}

fn assign(points: &[f64], d: usize, centers: &[f64], labels: &mut [usize]) -> (bool, f64) {
    let k = centers.len() / d;
    let mut changed = false;
    let mut objective = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let p = &points[i * d..(i + 1) * d];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let dd = dist_sq(p, &centers[c * d..(c + 1) * d]);
            if dd < best_d {
                best_d = dd;
                best = c;
            }
        }
        if *label != best {
            *label = best;
            changed = true;
        }
        objective += best_d;
    }
    (changed, objective)
}

/// Lloyd's algorithm on a row-major `n x d` matrix with k-means++ seeding.
///
/// A cluster that becomes empty is reseeded at the point farthest from its
/// assigned center.
pub fn kmeans(points: &[f64], d: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeansResult> {
    if d == 0 || points.len() % d != 0 {
        return Err(Error::invalid("point matrix is not a whole number of rows"));
    }
    let n = points.len() / d;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(points, d, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut objective_trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let (changed, mut objective) = assign(points, d, &centers, &mut labels);

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for empty in empties {
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = dist_sq(&points[a * d..(a + 1) * d], &centers[labels[a] * d..(labels[a] + 1) * d]);
                    let db = dist_sq(&points[b * d..(b + 1) * d], &centers[labels[b] * d..(labels[b] + 1) * d]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(far) = far {
                let old = labels[far];
                objective -= dist_sq(&points[far * d..(far + 1) * d], &centers[old * d..(old + 1) * d]);
                counts[old] -= 1;
                counts[empty] = 1;
                labels[far] = empty;
                centers[empty * d..(empty + 1) * d].copy_from_slice(&points[far * d..(far + 1) * d]);
            }
        }
        objective_trace.push(objective.max(0.0));

        let mut sums = vec![0.0; k * d];
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..d {
                sums[l * d + j] += points[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        if !changed && iterations > 1 {
            break;
        }
    }

    Ok(KMeansResult {
        labels,
        centers,
        objective_trace,
        iterations,
    })
}

/// Clusters a dataset on the selected linear dimensions.
pub fn kmeans_cluster(dataset: &Dataset, k: usize, feature_dims: &[usize], seed: u64) -> Result<Clustering> {
    if feature_dims.is_empty() {
        return Err(Error::invalid("k-means needs at least one feature dimension"));
    }
    if let Some(&bad) = feature_dims.iter().find(|&&d| d >= dataset.m()) {
        return Err(Error::InvalidDimension {
            dim: bad,
            m: dataset.m(),
        });
    }
    if k > dataset.n() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the number of samples {}",
            dataset.n()
        )));
    }
    let rows: Vec<usize> = (0..dataset.n()).collect();
    let points = dataset.gather(&rows, feature_dims);
    let result = kmeans(&points, feature_dims.len(), k, seed, KMEANS_MAX_ITERS)?;
    let labels: Vec<u32> = result.labels.iter().map(|&l| l as u32).collect();
    Clustering::from_labels(&labels)
}
