//! Brushing, degree-of-interest propagation over time, and level-of-detail
//! substitution of models by kernel density estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Clustering, Dataset};
use crate::error::{Error, Result};
use crate::gmm::std_normal_pdf;
use crate::summary::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Brush {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
}

impl Brush {
    pub fn new(dim: usize, a: f64, b: f64) -> Result<Self> {
        if a.is_nan() || b.is_nan() || a > b {
            return Err(Error::invalid(format!("brush range [{a}, {b}] is empty or malformed")));
        }
        Ok(Brush { dim, a, b })
    }
}

/// Per-cluster degree of interest in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DoiVector(Vec<f64>);

impl DoiVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("degree of interest {v} outside [0, 1]")));
        }
        Ok(DoiVector(values))
    }

    pub fn ones(n: usize) -> Self {
        DoiVector(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        DoiVector(vec![0.0; n])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn mean(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.0.iter().sum::<f64>() / self.0.len() as f64
        }
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.0.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for DoiVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        DoiVector::new(v)
    }
}

impl From<DoiVector> for Vec<f64> {
    fn from(d: DoiVector) -> Self {
        d.0
    }
}

/// Mass of each cluster's 1D model inside the brushed range.
pub fn brush_doi(summary: &Summary, brush: &Brush) -> Result<DoiVector> {
    summary.check_dim(brush.dim)?;
    let values = summary
        .clusters
        .iter()
        .map(|c| {
            let g = c.gmm_1d(brush.dim)?;
            Ok((g.cdf_1d_unchecked(brush.b) - g.cdf_1d_unchecked(brush.a)).clamp(0.0, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    DoiVector::new(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    And,
    Or,
}

/// Element-wise min (`and`) or max (`or`).
pub fn combine_doi(dois: &[DoiVector], mode: CombineMode) -> Result<DoiVector> {
    let first = dois
        .first()
        .ok_or_else(|| Error::invalid("nothing to combine"))?;
    let mut out = first.0.clone();
    for d in &dois[1..] {
        d.check_len(out.len())?;
        for (o, &v) in out.iter_mut().zip(&d.0) {
            *o = match mode {
                CombineMode::And => o.min(v),
                CombineMode::Or => o.max(v),
            };
        }
    }
    Ok(DoiVector(out))
}

/// Sparse `(clusters at t+1) x (clusters at t)` matrix, entries stored in
/// row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub rows: usize,
    pub cols: usize,
    /// `(row, col, value)` triples sorted by row then column.
    pub entries: Vec<(usize, usize, f64)>,
}

impl TransferMatrix {
    pub fn identity(n: usize) -> Self {
        TransferMatrix {
            rows: n,
            cols: n,
            entries: (0..n).map(|i| (i, i, 1.0)).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries
            .binary_search_by(|&(r, c, _)| (r, c).cmp(&(row, col)))
            .map(|i| self.entries[i].2)
            .unwrap_or(0.0)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows];
        for &(r, _, v) in &self.entries {
            sums[r] += v;
        }
        sums
    }

    fn from_counts(rows: usize, cols: usize, counts: BTreeMap<(usize, usize), usize>, row_sizes: &[usize]) -> Self {
        TransferMatrix {
            rows,
            cols,
            entries: counts
                .into_iter()
                .map(|((r, c), k)| (r, c, k as f64 / row_sizes[r] as f64))
                .collect(),
        }
    }
}

/// Entries `|C_l^t ∩ C_j^{t+1}| / |C_j^{t+1}|` for samples indexed
/// identically in both frames.
pub fn build_transfer_matrix(cl_t: &Clustering, cl_next: &Clustering) -> Result<TransferMatrix> {
    if cl_t.len() != cl_next.len() {
        return Err(Error::LengthMismatch {
            attribute: "cluster labels".into(),
            expected: cl_t.len(),
            actual: cl_next.len(),
        });
    }
    let mut counts = BTreeMap::new();
    for (&l, &j) in cl_t.labels().iter().zip(cl_next.labels()) {
        *counts.entry((j as usize, l as usize)).or_insert(0) += 1;
    }
    let sizes: Vec<usize> = cl_next.index_sets().iter().map(Vec::len).collect();
    Ok(TransferMatrix::from_counts(
        cl_next.cluster_count(),
        cl_t.cluster_count(),
        counts,
        &sizes,
    ))
}

/// Like [`build_transfer_matrix`] but matching samples through persistent
/// ids. Samples born after frame `t` leave their row summing below one.
pub fn build_transfer_matrix_by_id(
    ids_t: &[u64],
    cl_t: &Clustering,
    ids_next: &[u64],
    cl_next: &Clustering,
) -> Result<TransferMatrix> {
    if ids_t.len() != cl_t.len() || ids_next.len() != cl_next.len() {
        return Err(Error::invalid("sample ids and labels differ in length"));
    }
    let mut label_of: std::collections::HashMap<u64, u32> = std::collections::HashMap::with_capacity(ids_t.len());
    for (&id, &l) in ids_t.iter().zip(cl_t.labels()) {
        if label_of.insert(id, l).is_some() {
            return Err(Error::invalid(format!("duplicate sample id {id}")));
        }
    }
    let mut counts = BTreeMap::new();
    for (id, &j) in ids_next.iter().zip(cl_next.labels()) {
        if let Some(&l) = label_of.get(id) {
            *counts.entry((j as usize, l as usize)).or_insert(0) += 1;
        }
    }
    let sizes: Vec<usize> = cl_next.index_sets().iter().map(Vec::len).collect();
    Ok(TransferMatrix::from_counts(
        cl_next.cluster_count(),
        cl_t.cluster_count(),
        counts,
        &sizes,
    ))
}

/// `M * doi`.
pub fn advance_doi(m: &TransferMatrix, doi: &DoiVector) -> Result<DoiVector> {
    doi.check_len(m.cols)?;
    let mut out = vec![0.0; m.rows];
    for &(r, c, v) in &m.entries {
        out[r] += v * doi.0[c];
    }
    // rounding may push a full row a hair above one
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(DoiVector(out))
}

/// `second * first`: the transfer over two consecutive steps.
pub fn compose(second: &TransferMatrix, first: &TransferMatrix) -> Result<TransferMatrix> {
    if second.cols != first.rows {
        return Err(Error::DimensionMismatch {
            expected: first.rows,
            actual: second.cols,
        });
    }
    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); first.rows];
    for &(r, c, v) in &first.entries {
        by_row[r].push((c, v));
    }
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(r, k, a) in &second.entries {
        for &(c, b) in &by_row[k] {
            *acc.entry((r, c)).or_insert(0.0) += a * b;
        }
    }
    Ok(TransferMatrix {
        rows: second.rows,
        cols: first.cols,
        entries: acc.into_iter().map(|((r, c), v)| (r, c, v)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    /// `0.9 min(sd, IQR / 1.34) n^(-1/5)` per dimension.
    #[default]
    Silverman,
}

/// Kernel bandwidth for one dimension's samples.
pub fn bandwidth(values: &[f64], rule: BandwidthRule) -> f64 {
    let n = values.len();
    let BandwidthRule::Silverman = rule;
    if n < 2 {
        return 1e-6 * values.first().map_or(1.0, |v| v.abs().max(1.0));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1) as f64;
        let i = pos.floor() as usize;
        let f = pos - i as f64;
        if i + 1 < n {
            sorted[i] * (1.0 - f) + sorted[i + 1] * f
        } else {
            sorted[i]
        }
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-6 * mean.abs().max(1.0)
    }
}

/// Raw samples and per-dimension bandwidths of one substituted cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterKde {
    /// One column per linear dimension.
    pub columns: Vec<Vec<f64>>,
    pub bandwidths: Vec<f64>,
}

/// Kernels are ignored beyond this many bandwidths in 2D evaluation.
pub const KDE_CUTOFF: f64 = 4.0;

impl ClusterKde {
    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gaussian-kernel density estimate of one dimension at `x`.
    pub fn density_1d(&self, dim: usize, x: f64) -> f64 {
        let h = self.bandwidths[dim];
        let s: f64 = self.columns[dim].iter().map(|&v| std_normal_pdf((x - v) / h)).sum();
        s / (self.len() as f64 * h)
    }
}

/// Clusters whose models are replaced by kernel density estimates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LodOverlay {
    kdes: Vec<Option<ClusterKde>>,
}

impl LodOverlay {
    pub fn kde(&self, cluster: usize) -> Option<&ClusterKde> {
        self.kdes.get(cluster).and_then(Option::as_ref)
    }

    pub fn substituted(&self) -> Vec<usize> {
        (0..self.kdes.len()).filter(|&c| self.kdes[c].is_some()).collect()
    }
}

/// Substitutes every cluster with `doi >= threshold` by a KDE over its raw
/// samples.
pub fn lod_substitute(
    summary: &Summary,
    doi: &DoiVector,
    threshold: f64,
    dataset: &Dataset,
    clustering: &Clustering,
    rule: BandwidthRule,
) -> Result<LodOverlay> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::invalid(format!("LOD threshold {threshold} must be non-negative")));
    }
    doi.check_len(summary.cluster_count())?;
    if clustering.cluster_count() != summary.cluster_count() || dataset.m() != summary.m() {
        return Err(Error::invalid("raw data does not match the summary"));
    }
    let kdes = summary
        .clusters
        .iter()
        .zip(clustering.index_sets())
        .enumerate()
        .map(|(c, (cs, rows))| {
            if rows.len() != cs.count {
                return Err(Error::invalid(format!("cluster {c} size differs from the summary")));
            }
            if doi.get(c) < threshold {
                return Ok(None);
            }
            let columns: Vec<Vec<f64>> = (0..dataset.m())
                .map(|d| rows.iter().map(|&i| dataset.value(i, d)).collect())
                .collect();
            let bandwidths = columns.iter().map(|col| bandwidth(col, rule)).collect();
            Ok(Some(ClusterKde { columns, bandwidths }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LodOverlay { kdes })
}
