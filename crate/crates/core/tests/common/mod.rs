#![allow(dead_code)]

use std::collections::BTreeMap;

use gmmscope_core::dataset::{AttributeKind, AttributeSpec};
use gmmscope_core::fitting::FitConfig;
use gmmscope_core::summary::{ClusterSummary, SubsetKey, Summary};
use gmmscope_core::{Gaussian, Gmm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// `pos` plus `extra` scalar attributes.
pub fn attributes(extra: usize) -> Vec<AttributeSpec> {
    let mut a = vec![AttributeSpec::new("pos", AttributeKind::Position)];
    for i in 0..extra {
        a.push(AttributeSpec::new(format!("s{i}"), AttributeKind::Scalar));
    }
    a
}

/// Summary assembled from hand-made models, `(count, models)` per cluster.
pub fn summary_from(extra: usize, clusters: Vec<(usize, Vec<(SubsetKey, Gmm)>)>) -> Summary {
    let mut s = Summary::empty(attributes(extra), FitConfig::default()).unwrap();
    for (id, (count, models)) in clusters.into_iter().enumerate() {
        s.clusters.push(ClusterSummary {
            id,
            count,
            gmms: models.into_iter().collect(),
            wasserstein: BTreeMap::new(),
            outlier_order: BTreeMap::new(),
            centroid: [0.0; 3],
        });
        s.n_total += count;
    }
    s
}

pub fn gauss1(w: f64, mu: f64, sd: f64) -> Gaussian {
    Gaussian::new(w, vec![mu], vec![sd * sd]).unwrap()
}

pub fn random_gmm_1d(rng: &mut ChaCha8Rng, k: usize) -> Gmm {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    Gmm::new(
        raw.iter()
            .map(|w| gauss1(w / total, rng.random_range(-5.0..5.0), rng.random_range(0.3..2.5)))
            .collect(),
    )
    .unwrap()
}

pub fn random_gmm_2d(rng: &mut ChaCha8Rng, k: usize) -> Gmm {
    let comps = (0..k)
        .map(|_| {
            let (sx, sy): (f64, f64) = (rng.random_range(0.4..2.5), rng.random_range(0.4..2.5));
            let rho: f64 = rng.random_range(-0.85..0.85);
            Gaussian::new(
                1.0 / k as f64,
                vec![rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)],
                vec![sx * sx, rho * sx * sy, rho * sx * sy, sy * sy],
            )
            .unwrap()
        })
        .collect();
    Gmm::new(comps).unwrap()
}

/// One draw from a mixture, written without the library's sampler.
pub fn draw(rng: &mut ChaCha8Rng, gmm: &Gmm) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let comps = gmm.components();
    let mut g = &comps[comps.len() - 1];
    for c in comps {
        acc += c.weight();
        if u < acc {
            g = c;
            break;
        }
    }
    let d = g.dim();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    // lower Cholesky factor by hand (d <= 3)
    let cov = g.cov();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = cov[i * d + j] - (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum::<f64>();
            l[i * d + j] = if i == j { s.sqrt() } else { s / l[j * d + j] };
        }
    }
    (0..d)
        .map(|i| g.mean()[i] + (0..=i).map(|k| l[i * d + k] * z[k]).sum::<f64>())
        .collect()
}

/// Composite Simpson rule with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Mixture density written out from the parameters.
pub fn dense_density(gmm: &Gmm, x: &[f64]) -> f64 {
    gmm.components()
        .iter()
        .map(|g| {
            let d = g.dim();
            let diff: Vec<f64> = (0..d).map(|i| x[i] - g.mean()[i]).collect();
            let (inv, det) = invert_small(g.cov(), d);
            let q: f64 = (0..d).map(|i| (0..d).map(|j| diff[i] * inv[i * d + j] * diff[j]).sum::<f64>()).sum();
            g.weight() * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt()
        })
        .sum()
}

/// Inverse and determinant of a 1x1, 2x2 or 3x3 matrix by cofactors.
pub fn invert_small(m: &[f64], d: usize) -> (Vec<f64>, f64) {
    match d {
        1 => (vec![1.0 / m[0]], m[0]),
        2 => {
            let det = m[0] * m[3] - m[1] * m[2];
            (vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det], det)
        }
        3 => {
            let c = |r: usize, k: usize| m[r * 3 + k];
            let cof = [
                c(1, 1) * c(2, 2) - c(1, 2) * c(2, 1),
                c(1, 2) * c(2, 0) - c(1, 0) * c(2, 2),
                c(1, 0) * c(2, 1) - c(1, 1) * c(2, 0),
                c(0, 2) * c(2, 1) - c(0, 1) * c(2, 2),
                c(0, 0) * c(2, 2) - c(0, 2) * c(2, 0),
                c(0, 1) * c(2, 0) - c(0, 0) * c(2, 1),
                c(0, 1) * c(1, 2) - c(0, 2) * c(1, 1),
                c(0, 2) * c(1, 0) - c(0, 0) * c(1, 2),
                c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0),
            ];
            let det = c(0, 0) * cof[0] + c(0, 1) * cof[1] + c(0, 2) * cof[2];
            let mut inv = vec![0.0; 9];
            for r in 0..3 {
                for k in 0..3 {
                    inv[r * 3 + k] = cof[k * 3 + r] / det;
                }
            }
            (inv, det)
        }
        _ => panic!("unsupported size {d}"),
    }
}
