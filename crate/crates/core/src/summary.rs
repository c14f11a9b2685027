//! Per-cluster mixture summaries: building, statistics and the gzip-JSON
//! file format.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{self, AttributeSpec, Clustering, Dataset};
use crate::error::{Error, Result};
use crate::fitting::{component_bounds, select_components, FitConfig, Samples};
use crate::gmm::{Gaussian, Gmm};
use crate::metrics::{rank_outliers, wasserstein_1d, EmpiricalCdf};
use crate::seed;

pub const SUMMARY_VERSION: u32 = 1;

/// Sorted set of linear dimension indices a mixture is defined over.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubsetKey(Vec<usize>);

impl SubsetKey {
    pub fn new(mut dims: Vec<usize>) -> Result<Self> {
        dims.sort_unstable();
        if dims.is_empty() || dims.len() > 3 || dims.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("invalid subset {dims:?}")));
        }
        Ok(SubsetKey(dims))
    }

    pub fn one(dim: usize) -> Self {
        SubsetKey(vec![dim])
    }

    pub fn pair(i: usize, j: usize) -> Result<Self> {
        Self::new(vec![i, j])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for SubsetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

impl FromStr for SubsetKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split('|')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::invalid(format!("malformed subset key {s:?}")))?;
        let key = SubsetKey::new(dims)?;
        if key.to_string() != s {
            return Err(Error::invalid(format!("subset key {s:?} is not in canonical form")));
        }
        Ok(key)
    }
}

impl Serialize for SubsetKey {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubsetKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSummary {
    pub id: usize,
    pub count: usize,
    pub gmms: BTreeMap<SubsetKey, Gmm>,
    /// 1D Wasserstein distance between the data and the stored model.
    pub wasserstein: BTreeMap<usize, f64>,
    /// Global sample indices by descending outlier score, per 3D key.
    pub outlier_order: BTreeMap<SubsetKey, Vec<usize>>,
    /// Mean sample position.
    pub centroid: [f64; 3],
}

impl ClusterSummary {
    pub fn gmm(&self, key: &SubsetKey) -> Result<&Gmm> {
        self.gmms
            .get(key)
            .ok_or_else(|| Error::MissingKey(format!("model for {key} in cluster {}", self.id)))
    }

    pub fn gmm_1d(&self, dim: usize) -> Result<&Gmm> {
        self.gmm(&SubsetKey::one(dim))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub attributes: Vec<AttributeSpec>,
    pub n_total: usize,
    pub clusters: Vec<ClusterSummary>,
    pub config: FitConfig,
    pub provenance: String,
}

impl Summary {
    pub fn empty(attributes: Vec<AttributeSpec>, config: FitConfig) -> Result<Self> {
        dataset::validate_attributes(&attributes)?;
        Ok(Summary {
            attributes,
            n_total: 0,
            clusters: Vec::new(),
            config,
            provenance: String::new(),
        })
    }

    pub fn m(&self) -> usize {
        self.attributes.iter().map(|a| a.kind.components()).sum()
    }

    pub fn dim_names(&self) -> Vec<String> {
        dataset::dim_names(&self.attributes)
    }

    pub fn position_key(&self) -> SubsetKey {
        SubsetKey(dataset::position_dims(&self.attributes).to_vec())
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if dim >= self.m() {
            return Err(Error::InvalidDimension { dim, m: self.m() });
        }
        Ok(())
    }

    /// `|C| / N` per cluster.
    pub fn cluster_weights(&self) -> Vec<f64> {
        let n = self.n_total.max(1) as f64;
        self.clusters.iter().map(|c| c.count as f64 / n).collect()
    }

    /// Union of the `n_sigma` envelopes of a dimension's 1D models.
    pub fn extent(&self, dim: usize, n_sigma: f64) -> Result<(f64, f64)> {
        self.check_dim(dim)?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &self.clusters {
            if let Some(g) = c.gmms.get(&SubsetKey::one(dim)) {
                let (a, b) = g.envelope(0, n_sigma);
                lo = lo.min(a);
                hi = hi.max(b);
            }
        }
        if lo.is_finite() && hi.is_finite() {
            if hi <= lo {
                let pad = lo.abs().max(1.0) * 1e-6;
                return Ok((lo - pad, hi + pad));
            }
            Ok((lo, hi))
        } else {
            Ok((0.0, 1.0))
        }
    }

    pub fn mean_wasserstein(&self) -> f64 {
        let vals: Vec<f64> = self
            .clusters
            .iter()
            .flat_map(|c| c.wasserstein.values().copied())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Mean over clusters of the per-dimension distance.
    pub fn mean_wasserstein_per_dim(&self) -> Vec<f64> {
        (0..self.m())
            .map(|d| {
                let vals: Vec<f64> = self.clusters.iter().filter_map(|c| c.wasserstein.get(&d).copied()).collect();
                if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect()
    }
}

/// Every key a complete cluster summary holds: all 1D keys, all pairs and
/// one triple per position or vector attribute.
pub fn full_key_set(attributes: &[AttributeSpec]) -> Vec<SubsetKey> {
    let m: usize = attributes.iter().map(|a| a.kind.components()).sum();
    let mut keys: Vec<SubsetKey> = (0..m).map(SubsetKey::one).collect();
    for i in 0..m {
        for j in i + 1..m {
            keys.push(SubsetKey(vec![i, j]));
        }
    }
    for t in dataset::vector_triples(attributes) {
        keys.push(SubsetKey(t.to_vec()));
    }
    keys
}

pub type SubsetFilter<'a> = &'a (dyn Fn(&SubsetKey) -> bool + Sync);

/// Predicate dropping every pair key, used by `--skip-pairs`.
pub fn skip_pairs(key: &SubsetKey) -> bool {
    key.len() != 2
}

fn task_seed(base: u64, cluster: usize, key: &SubsetKey) -> u64 {
    let mut parts = vec![cluster as u64];
    parts.extend(key.dims().iter().map(|&d| d as u64));
    seed::derive(base, &parts)
}

/// Fits the model for one (cluster, key) task on the cluster's samples.
fn fit_task(
    dataset: &Dataset,
    rows: &[usize],
    cluster: usize,
    key: &SubsetKey,
    k_range: (usize, usize),
    config: &FitConfig,
) -> Result<Gmm> {
    let data = dataset.gather(rows, key.dims());
    let samples = Samples::new(&data, key.len())?;
    let cfg = config.with_seed(task_seed(config.seed, cluster, key));
    select_components(samples, k_range, &cfg)?.gmm.quantized()
}

/// Builds the summary. 1D models are always fitted since their component
/// counts bound the higher-dimensional searches; `subset_filter` prunes pair
/// and triple keys. Pairs inside a vector attribute are marginals of the
/// attribute's triple when that triple is stored.
pub fn build_summary(
    dataset: &Dataset,
    clustering: &Clustering,
    config: &FitConfig,
    subset_filter: Option<SubsetFilter<'_>>,
) -> Result<Summary> {
    config.validate()?;
    if clustering.len() != dataset.n() {
        return Err(Error::LengthMismatch {
            attribute: "cluster labels".into(),
            expected: dataset.n(),
            actual: clustering.len(),
        });
    }
    let m = dataset.m();
    let keep = |k: &SubsetKey| k.len() == 1 || subset_filter.is_none_or(|f| f(k));
    let triples: Vec<SubsetKey> = dataset
        .vector_triples()
        .iter()
        .map(|t| SubsetKey(t.to_vec()))
        .filter(|k| keep(k))
        .collect();
    let inside_triple = |k: &SubsetKey| {
        triples
            .iter()
            .find(|t| k.dims().iter().all(|d| t.dims().contains(d)))
            .cloned()
    };
    let mut higher: Vec<SubsetKey> = triples.clone();
    for i in 0..m {
        for j in i + 1..m {
            let k = SubsetKey(vec![i, j]);
            if keep(&k) && inside_triple(&k).is_none() {
                higher.push(k);
            }
        }
    }
    let clusters = clustering.index_sets();

    // 1D fits first; their component counts bound the higher-D searches.
    let one_d: Vec<(usize, usize)> = (0..clusters.len()).flat_map(|c| (0..m).map(move |d| (c, d))).collect();
    let one_d_fits: Vec<Gmm> = one_d
        .par_iter()
        .map(|&(c, d)| {
            fit_task(dataset, &clusters[c], c, &SubsetKey::one(d), (1, config.max_components), config)
        })
        .collect::<Result<_>>()?;

    let mut counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); clusters.len()];
    for (&(c, d), g) in one_d.iter().zip(&one_d_fits) {
        counts[c].insert(d, g.len());
    }

    let multi: Vec<(usize, &SubsetKey)> = (0..clusters.len())
        .flat_map(|c| higher.iter().map(move |k| (c, k)))
        .collect();
    let multi_fits: Vec<Gmm> = multi
        .par_iter()
        .map(|&(c, key)| {
            let bounds = component_bounds(&counts[c], key.dims(), config.max_components)?;
            fit_task(dataset, &clusters[c], c, key, bounds, config)
        })
        .collect::<Result<_>>()?;

    let wasserstein: Vec<f64> = one_d
        .par_iter()
        .zip(&one_d_fits)
        .map(|(&(c, d), g)| {
            let values = clusters[c].iter().map(|&i| dataset.value(i, d)).collect();
            wasserstein_1d(&EmpiricalCdf::new(values)?, g)
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<ClusterSummary> = clusters
        .iter()
        .enumerate()
        .map(|(id, rows)| {
            let pos = dataset.position_dims();
            let centroid = std::array::from_fn(|k| {
                rows.iter().map(|&i| dataset.value(i, pos[k])).sum::<f64>() / rows.len() as f64
            });
            ClusterSummary {
                id,
                count: rows.len(),
                gmms: BTreeMap::new(),
                wasserstein: BTreeMap::new(),
                outlier_order: BTreeMap::new(),
                centroid,
            }
        })
        .collect();
    for ((&(c, d), g), w) in one_d.iter().zip(one_d_fits).zip(wasserstein) {
        out[c].gmms.insert(SubsetKey::one(d), g);
        out[c].wasserstein.insert(d, w);
    }
    for (&(c, key), g) in multi.iter().zip(multi_fits) {
        out[c].gmms.insert(key.clone(), g);
    }
    for cs in out.iter_mut() {
        for t in &triples {
            let g3 = cs.gmms[t].clone();
            let d = t.dims();
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let k = SubsetKey(vec![d[a], d[b]]);
                if keep(&k) {
                    cs.gmms.insert(k, g3.marginal(&[a, b])?.quantized()?);
                }
            }
        }
    }

    if config.rank_outliers {
        let orders: Vec<Vec<(SubsetKey, Vec<usize>)>> = clusters
            .par_iter()
            .zip(&out)
            .map(|(rows, cs)| {
                triples
                    .iter()
                    .map(|t| {
                        let data = dataset.gather(rows, t.dims());
                        let local = rank_outliers(Samples::new(&data, 3)?, &cs.gmms[t])?;
                        Ok((t.clone(), local.into_iter().map(|i| rows[i]).collect()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for (cs, o) in out.iter_mut().zip(orders) {
            cs.outlier_order = o.into_iter().collect();
        }
    }

    Ok(Summary {
        attributes: dataset.attributes().to_vec(),
        n_total: dataset.n(),
        clusters: out,
        config: config.clone(),
        provenance: String::new(),
    })
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize, Deserialize)]
struct GmmRecord {
    weights: Vec<f32>,
    means: Vec<Vec<f32>>,
    cov_lower_triangle: Vec<Vec<f32>>,
}

impl GmmRecord {
    fn from_gmm(g: &Gmm) -> Self {
        GmmRecord {
            weights: g.components().iter().map(|c| c.weight() as f32).collect(),
            means: g
                .components()
                .iter()
                .map(|c| c.mean().iter().map(|&v| v as f32).collect())
                .collect(),
            cov_lower_triangle: g
                .components()
                .iter()
                .map(|c| c.cov_lower().iter().map(|&v| v as f32).collect())
                .collect(),
        }
    }

    fn to_gmm(&self) -> Result<Gmm> {
        if self.weights.len() != self.means.len() || self.weights.len() != self.cov_lower_triangle.len() {
            return Err(Error::Corrupt("mixture arrays differ in length".into()));
        }
        Gmm::new(
            self.weights
                .iter()
                .zip(&self.means)
                .zip(&self.cov_lower_triangle)
                .map(|((&w, mu), cov)| {
                    Gaussian::from_packed(
                        w as f64,
                        mu.iter().map(|&v| v as f64).collect(),
                        &cov.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterRecord {
    id: usize,
    count: usize,
    centroid: [f64; 3],
    gmms: BTreeMap<SubsetKey, GmmRecord>,
    wasserstein: BTreeMap<SubsetKey, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    outliers: BTreeMap<SubsetKey, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    version: u32,
    attributes: Vec<AttributeSpec>,
    n_total: usize,
    config: FitConfig,
    provenance: String,
    clusters: Vec<ClusterRecord>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

fn to_envelope(summary: &Summary) -> Envelope {
    Envelope {
        version: SUMMARY_VERSION,
        attributes: summary.attributes.clone(),
        n_total: summary.n_total,
        config: summary.config.clone(),
        provenance: summary.provenance.clone(),
        clusters: summary
            .clusters
            .iter()
            .map(|c| ClusterRecord {
                id: c.id,
                count: c.count,
                centroid: c.centroid,
                gmms: c.gmms.iter().map(|(k, g)| (k.clone(), GmmRecord::from_gmm(g))).collect(),
                wasserstein: c.wasserstein.iter().map(|(&d, &w)| (SubsetKey::one(d), w)).collect(),
                outliers: c.outlier_order.clone(),
            })
            .collect(),
    }
}

fn from_envelope(env: Envelope) -> Result<Summary> {
    dataset::validate_attributes(&env.attributes)?;
    let clusters = env
        .clusters
        .into_iter()
        .map(|c| {
            Ok(ClusterSummary {
                id: c.id,
                count: c.count,
                gmms: c
                    .gmms
                    .iter()
                    .map(|(k, g)| Ok((k.clone(), g.to_gmm()?)))
                    .collect::<Result<_>>()?,
                wasserstein: c
                    .wasserstein
                    .into_iter()
                    .map(|(k, w)| match k.dims() {
                        [d] => Ok((*d, w)),
                        _ => Err(Error::Corrupt(format!("wasserstein key {k} is not 1D"))),
                    })
                    .collect::<Result<_>>()?,
                outlier_order: c.outliers,
                centroid: c.centroid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary {
        attributes: env.attributes,
        n_total: env.n_total,
        clusters,
        config: env.config,
        provenance: env.provenance,
    })
}

/// Gzip-compressed JSON bytes of the summary.
pub fn summary_to_bytes(summary: &Summary) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&to_envelope(summary)).map_err(|e| Error::json("summary", e))?;
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&json)
        .and_then(|_| enc.finish())
        .map_err(|e| Error::Corrupt(format!("compression failed: {e}")))
}

pub fn summary_from_bytes(bytes: &[u8]) -> Result<Summary> {
    let mut json = Vec::new();
    // The gzip trailer's CRC-32 and length catch truncation and bit rot.
    GzDecoder::new(bytes)
        .read_to_end(&mut json)
        .map_err(|e| Error::Corrupt(format!("summary payload failed its checksum: {e}")))?;
    let probe: VersionProbe = serde_json::from_slice(&json).map_err(|e| Error::json("summary header", e))?;
    if probe.version != SUMMARY_VERSION {
        return Err(Error::Version {
            found: probe.version,
            expected: SUMMARY_VERSION,
        });
    }
    let env: Envelope = serde_json::from_slice(&json).map_err(|e| Error::json("summary", e))?;
    from_envelope(env)
}

pub fn save_summary(summary: &Summary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, summary_to_bytes(summary)?).map_err(|e| Error::io(path, e))
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<Summary> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    summary_from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub gmm_count: usize,
    pub mean_components: f64,
    /// Population standard deviation.
    pub std_components: f64,
    pub mean_wasserstein: f64,
    pub byte_size: usize,
}

impl fmt::Display for SummaryStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "GMM comp. {:.2} ± {:.2} | Wasserstein dist. {:.4} | {} models | {} bytes",
            self.mean_components, self.std_components, self.mean_wasserstein, self.gmm_count, self.byte_size
        )
    }
}

pub fn summary_stats(summary: &Summary) -> Result<SummaryStats> {
    let ks: Vec<f64> = summary
        .clusters
        .iter()
        .flat_map(|c| c.gmms.values().map(|g| g.len() as f64))
        .collect();
    let (mean, std) = if ks.is_empty() {
        (0.0, 0.0)
    } else {
        let mean = ks.iter().sum::<f64>() / ks.len() as f64;
        let var = ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / ks.len() as f64;
        (mean, var.sqrt())
    };
    Ok(SummaryStats {
        gmm_count: ks.len(),
        mean_components: mean,
        std_components: std,
        mean_wasserstein: summary.mean_wasserstein(),
        byte_size: summary_to_bytes(summary)?.len(),
    })
}
