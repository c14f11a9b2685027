//! Seeded synthetic benchmark: ten clusters, 100,000 points, nine linear
//! dimensions.
//!
//! Per cluster the position is an anisotropic Gaussian with a tenth of the
//! points replaced by uniform noise over the cluster's 3-sigma box. The six
//! scalar dimensions have deliberately different marginals:
//!
//! | dim | name          | per-cluster distribution                     |
//! |-----|---------------|----------------------------------------------|
//! | 3   | `gauss`       | normal                                       |
//! | 4   | `uniform`     | uniform on an interval                       |
//! | 5   | `exponential` | exponential, rate drawn per cluster          |
//! | 6   | `bimodal`     | equal mixture of two separated normals       |
//! | 7   | `correlated`  | affine in `gauss` plus small normal noise    |
//! | 8   | `constant`    | constant plus tiny jitter                    |

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use super::{AttributeKind, AttributeSpec, Clustering, Dataset};
use crate::seed;

pub const SYNTHETIC_POINTS: usize = 100_000;
pub const SYNTHETIC_CLUSTERS: usize = 10;
pub const SYNTHETIC_NOISE_FRACTION: f64 = 0.10;

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub clustering: Clustering,
    /// Whether each sample's position is uniform noise.
    pub is_noise: Vec<bool>,
}

pub fn synthetic_attributes() -> Vec<AttributeSpec> {
    let mut attrs = vec![AttributeSpec::new("pos", AttributeKind::Position)];
    for name in ["gauss", "uniform", "exponential", "bimodal", "correlated", "constant"] {
        attrs.push(AttributeSpec::new(name, AttributeKind::Scalar));
    }
    attrs
}

/// Random rotation from a normalized random quaternion.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.iter_mut().for_each(|v| *v /= norm);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn generate_synthetic(seed: u64) -> (Dataset, Clustering) {
    let s = generate_synthetic_detailed(seed);
    (s.dataset, s.clustering)
}

pub fn generate_synthetic_detailed(seed: u64) -> SyntheticDataset {
    let per_cluster = SYNTHETIC_POINTS / SYNTHETIC_CLUSTERS;
    let mut columns = vec![Vec::with_capacity(SYNTHETIC_POINTS); 9];
    let mut labels = Vec::with_capacity(SYNTHETIC_POINTS);
    let mut is_noise = Vec::with_capacity(SYNTHETIC_POINTS);

    for c in 0..SYNTHETIC_CLUSTERS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5e7, c as u64]));

        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(-100.0..100.0));
        let scales: [f64; 3] = std::array::from_fn(|_| rng.random_range(2.0..8.0));
        let rot = random_rotation(&mut rng);
        let half_box = 3.0 * scales.iter().copied().fold(0.0, f64::max);

        let noise_count = (SYNTHETIC_NOISE_FRACTION * per_cluster as f64).round() as usize;
        let mut noise_mask: Vec<bool> = (0..per_cluster).map(|i| i < noise_count).collect();
        noise_mask.shuffle(&mut rng);

        let gauss = Normal::new(rng.random_range(-5.0..5.0), rng.random_range(0.5..2.0)).unwrap();
        let uni_lo: f64 = rng.random_range(-5.0..5.0);
        let uni_width: f64 = rng.random_range(2.0..6.0);
        let exp = Exp::new(rng.random_range(0.1..0.3)).unwrap();
        let bi_center: f64 = rng.random_range(-5.0..5.0);
        let bi_sep: f64 = rng.random_range(2.0..4.0);
        let bi = Normal::new(0.0, rng.random_range(0.5..1.0)).unwrap();
        let slope: f64 = rng.random_range(-2.0..2.0);
        let offset: f64 = rng.random_range(-3.0..3.0);
        let corr_noise = Normal::new(0.0, 0.25).unwrap();
        let constant: f64 = rng.random_range(-1.0..1.0);
        let jitter = Normal::new(0.0, 1e-3).unwrap();

        for &noise in &noise_mask {
            let pos: [f64; 3] = if noise {
                std::array::from_fn(|k| center[k] + rng.random_range(-half_box..half_box))
            } else {
                let z: [f64; 3] =
                    std::array::from_fn(|k| scales[k] * rng.sample::<f64, _>(StandardNormal));
                std::array::from_fn(|r| center[r] + (0..3).map(|k| rot[r][k] * z[k]).sum::<f64>())
            };
            let g = gauss.sample(&mut rng);
            let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let row = [
                pos[0],
                pos[1],
                pos[2],
                g,
                uni_lo + uni_width * rng.random::<f64>(),
                exp.sample(&mut rng),
                bi_center + side * bi_sep + bi.sample(&mut rng),
                slope * g + offset + corr_noise.sample(&mut rng),
                constant + jitter.sample(&mut rng),
            ];
            // Stored as f32 on disk; keep the in-memory copy identical.
            for (col, v) in columns.iter_mut().zip(row) {
                col.push(v as f32 as f64);
            }
            labels.push(c as u32);
            is_noise.push(noise);
        }
    }

    let dataset = Dataset::new(synthetic_attributes(), columns).expect("synthetic data is valid");
    let clustering = Clustering::from_labels(&labels).expect("labels are non-negative");
    SyntheticDataset {
        dataset,
        clustering,
        is_noise,
    }
}
