//! Density grids for 1D curves, 2D heatmaps, parallel-coordinate panels
//! and time histograms, plus the density-to-opacity tone map.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{normal_pdf, Gmm};
use crate::interaction::{DoiVector, LodOverlay, KDE_CUTOFF};
use crate::summary::{SubsetKey, Summary};

/// Gaussians contribute nothing beyond this Mahalanobis radius in 2D grids.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
/// Default extent margin around the models, in standard deviations.
pub const EXTENT_SIGMAS: f64 = 3.0;

/// What density views evaluate: the summary, optionally with some clusters
/// replaced by kernel density estimates.
#[derive(Debug, Clone, Copy)]
pub struct ViewSource<'a> {
    pub summary: &'a Summary,
    pub lod: Option<&'a LodOverlay>,
}

impl<'a> From<&'a Summary> for ViewSource<'a> {
    fn from(summary: &'a Summary) -> Self {
        ViewSource { summary, lod: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub dims: Vec<usize>,
    /// `[lo, hi]` per axis; samples sit at cell centers.
    pub extent: Vec<(f64, f64)>,
    pub resolution: Vec<usize>,
    /// Row-major: the first axis varies fastest, rows follow the second.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_size(&self, axis: usize) -> f64 {
        let (lo, hi) = self.extent[axis];
        (hi - lo) / self.resolution[axis] as f64
    }

    pub fn center(&self, axis: usize, i: usize) -> f64 {
        cell_center(self.extent[axis], self.resolution[axis], i)
    }

    /// Sum of values times cell volume.
    pub fn mass(&self) -> f64 {
        let vol: f64 = (0..self.dims.len()).map(|a| self.cell_size(a)).product();
        self.values.iter().sum::<f64>() * vol
    }
}

fn cell_center((lo, hi): (f64, f64), res: usize, i: usize) -> f64 {
    lo + (i as f64 + 0.5) * (hi - lo) / res as f64
}

fn check_extent(extent: (f64, f64), res: usize) -> Result<()> {
    if !(extent.0.is_finite() && extent.1.is_finite() && extent.0 < extent.1) || res == 0 {
        return Err(Error::invalid(format!(
            "grid extent [{}, {}] with {res} cells is empty",
            extent.0, extent.1
        )));
    }
    Ok(())
}

/// `|C| / N * doi_C` per cluster.
fn cluster_scales(summary: &Summary, doi: Option<&DoiVector>) -> Result<Vec<f64>> {
    let weights = summary.cluster_weights();
    match doi {
        Some(d) => {
            d.check_len(summary.cluster_count())?;
            Ok(weights.iter().zip(d.values()).map(|(w, v)| w * v).collect())
        }
        None => Ok(weights),
    }
}

pub fn default_extent(summary: &Summary, dim: usize) -> Result<(f64, f64)> {
    summary.extent(dim, EXTENT_SIGMAS)
}

/// `sum_C |C|/N doi_C p_C(x)` at each cell center.
pub fn density_1d(
    source: ViewSource<'_>,
    dim: usize,
    extent: (f64, f64),
    resolution: usize,
    doi: Option<&DoiVector>,
) -> Result<DensityGrid> {
    let summary = source.summary;
    summary.check_dim(dim)?;
    check_extent(extent, resolution)?;
    let scales = cluster_scales(summary, doi)?;
    let mut values = vec![0.0; resolution];
    for (c, cs) in summary.clusters.iter().enumerate() {
        let s = scales[c];
        if s == 0.0 {
            continue;
        }
        if let Some(kde) = source.lod.and_then(|l| l.kde(c)) {
            values.par_iter_mut().enumerate().for_each(|(i, v)| {
                *v += s * kde.density_1d(dim, cell_center(extent, resolution, i));
            });
        } else {
            let g = cs.gmm_1d(dim)?;
            for (i, v) in values.iter_mut().enumerate() {
                *v += s * g.density_unchecked(&[cell_center(extent, resolution, i)]);
            }
        }
    }
    Ok(DensityGrid {
        dims: vec![dim],
        extent: vec![extent],
        resolution: vec![resolution],
        values,
    })
}

/// One 2D Gaussian prepared for truncated accumulation.
struct Footprint {
    scale: f64,
    mean: [f64; 2],
    inv: [f64; 3],
    norm: f64,
    /// Row band covered by the 3-sigma ellipse.
    y_range: (f64, f64),
    sxx: f64,
    sxy: f64,
    syy: f64,
}

/// A kernel of one substituted cluster.
struct KernelSet<'a> {
    scale: f64,
    xs: &'a [f64],
    ys: &'a [f64],
    hx: f64,
    hy: f64,
}

/// Sum over clusters of `|C|/N doi_C p_C(x, y)`, each Gaussian truncated
/// to its 3-sigma ellipse. Rows (`dims.1`) are the slow axis.
pub fn density_2d(
    source: ViewSource<'_>,
    dims: (usize, usize),
    extent: ((f64, f64), (f64, f64)),
    resolution: (usize, usize),
    doi: Option<&DoiVector>,
) -> Result<DensityGrid> {
    let summary = source.summary;
    let (i, j) = dims;
    summary.check_dim(i)?;
    summary.check_dim(j)?;
    let key = SubsetKey::pair(i, j)?;
    let swap = i > j;
    check_extent(extent.0, resolution.0)?;
    check_extent(extent.1, resolution.1)?;
    let scales = cluster_scales(summary, doi)?;

    let mut feet = Vec::new();
    let mut kernels = Vec::new();
    for (c, cs) in summary.clusters.iter().enumerate() {
        let s = scales[c];
        if s == 0.0 {
            continue;
        }
        if let Some(kde) = source.lod.and_then(|l| l.kde(c)) {
            kernels.push(KernelSet {
                scale: s,
                xs: &kde.columns[i],
                ys: &kde.columns[j],
                hx: kde.bandwidths[i],
                hy: kde.bandwidths[j],
            });
            continue;
        }
        for g in cs.gmm(&key)?.components() {
            let (mx, my) = if swap { (g.mean()[1], g.mean()[0]) } else { (g.mean()[0], g.mean()[1]) };
            let c = g.cov();
            let (sxx, sxy, syy) = if swap { (c[3], c[1], c[0]) } else { (c[0], c[1], c[3]) };
            let inv = g.inverse();
            let (ixx, ixy, iyy) = if swap { (inv[3], inv[1], inv[0]) } else { (inv[0], inv[1], inv[3]) };
            let ry = FOOTPRINT_SIGMAS * syy.sqrt();
            feet.push(Footprint {
                scale: s * g.weight(),
                mean: [mx, my],
                inv: [ixx, ixy, iyy],
                norm: (-0.5 * g.log_det()).exp() / (2.0 * std::f64::consts::PI),
                y_range: (my - ry, my + ry),
                sxx,
                sxy,
                syy,
            });
        }
    }

    let (w, h) = resolution;
    let (ex, ey) = extent;
    let dx = (ex.1 - ex.0) / w as f64;
    let r2 = FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS;
    let mut values = vec![0.0; w * h];
    // Each row is owned by one task and visits Gaussians in a fixed order,
    // so the result does not depend on scheduling.
    values.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let y = cell_center(ey, h, row);
        for f in &feet {
            if y < f.y_range.0 || y > f.y_range.1 {
                continue;
            }
            // x-interval of the ellipse on this row: conditional mean +- half width
            let ddy = y - f.mean[1];
            let cx = f.mean[0] + f.sxy / f.syy * ddy;
            let cond_var = (f.sxx - f.sxy * f.sxy / f.syy).max(0.0);
            let rem = (r2 - ddy * ddy / f.syy).max(0.0);
            let half = (rem * cond_var).sqrt();
            let c0 = (((cx - half - ex.0) / dx - 0.5).floor().max(0.0)) as usize;
            let c1 = ((((cx + half - ex.0) / dx - 0.5).ceil()).min(w as f64 - 1.0)).max(-1.0);
            if c1 < 0.0 {
                continue;
            }
            for (col, v) in out.iter_mut().enumerate().take(c1 as usize + 1).skip(c0) {
                let ddx = cell_center(ex, w, col) - f.mean[0];
                let q = f.inv[0] * ddx * ddx + 2.0 * f.inv[1] * ddx * ddy + f.inv[2] * ddy * ddy;
                if q <= r2 {
                    *v += f.scale * f.norm * (-0.5 * q).exp();
                }
            }
        }
        for k in &kernels {
            let n = k.xs.len() as f64;
            let norm = k.scale / (n * 2.0 * std::f64::consts::PI * k.hx * k.hy);
            for (&sx, &sy) in k.xs.iter().zip(k.ys) {
                let zy = (y - sy) / k.hy;
                if zy.abs() > KDE_CUTOFF {
                    continue;
                }
                let lo = ((((sx - KDE_CUTOFF * k.hx - ex.0) / dx) - 0.5).floor().max(0.0)) as usize;
                let hi = (((sx + KDE_CUTOFF * k.hx - ex.0) / dx) - 0.5).ceil();
                if hi < 0.0 {
                    continue;
                }
                let hi = (hi as usize).min(w - 1);
                for (col, v) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
                    let zx = (cell_center(ex, w, col) - sx) / k.hx;
                    if zx.abs() <= KDE_CUTOFF {
                        *v += norm * (-0.5 * (zx * zx + zy * zy)).exp();
                    }
                }
            }
        }
    });

    Ok(DensityGrid {
        dims: vec![i, j],
        extent: vec![ex, ey],
        resolution: vec![w, h],
        values,
    })
}

/// Density at `y` of the interpolant `(1 - u) X_0 + u X_1` of a bivariate
/// mixture.
pub fn pcp_density(gmm2: &Gmm, u: f64, y: f64) -> Result<f64> {
    if gmm2.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            actual: gmm2.dim(),
        });
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("interpolation parameter {u} outside [0, 1]")));
    }
    Ok(interpolant_density(gmm2, u, y, [0.0, 0.0], [1.0, 1.0]))
}

/// Interpolant density in normalized coordinates `(x_k - lo_k) / s_k`.
fn interpolant_density(gmm2: &Gmm, u: f64, y: f64, lo: [f64; 2], s: [f64; 2]) -> f64 {
    let v = 1.0 - u;
    gmm2.components()
        .iter()
        .map(|g| {
            let m = g.mean();
            let c = g.cov();
            let mean = v * (m[0] - lo[0]) / s[0] + u * (m[1] - lo[1]) / s[1];
            let var = v * v * c[0] / (s[0] * s[0]) + 2.0 * u * v * c[1] / (s[0] * s[1]) + u * u * c[3] / (s[1] * s[1]);
            g.weight() * normal_pdf(y, mean, var)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcpImage {
    pub axes: Vec<usize>,
    /// Data extent each axis is normalized over.
    pub extents: Vec<(f64, f64)>,
    /// One panel per adjacent axis pair: `resolution.0` columns spanning
    /// `u` in `[0, 1]` inclusive, `resolution.1` rows over the normalized
    /// axis height.
    pub panels: Vec<DensityGrid>,
}

/// Parallel-coordinate density panels for consecutive axes.
///
/// Panel values are the normalized interpolant density divided by the
/// interpolated axis scale `(1 - u) s_i + u s_j`, so a panel's end columns
/// are the 1D densities of its axes in data units.
pub fn pcp_image(
    summary: &Summary,
    axes: &[usize],
    extents: Option<&[(f64, f64)]>,
    resolution: (usize, usize),
    doi: Option<&DoiVector>,
) -> Result<PcpImage> {
    if axes.len() < 2 {
        return Err(Error::invalid("parallel coordinates need at least two axes"));
    }
    let (w, h) = resolution;
    if w < 2 || h == 0 {
        return Err(Error::invalid("panel resolution must be at least 2 x 1"));
    }
    for &a in axes {
        summary.check_dim(a)?;
    }
    let extents: Vec<(f64, f64)> = match extents {
        Some(e) if e.len() == axes.len() => e.to_vec(),
        Some(_) => return Err(Error::invalid("one extent per axis required")),
        None => axes.iter().map(|&a| default_extent(summary, a)).collect::<Result<_>>()?,
    };
    for (&e, _) in extents.iter().zip(axes) {
        check_extent(e, h)?;
    }
    let scales = cluster_scales(summary, doi)?;

    let mut panels = Vec::with_capacity(axes.len() - 1);
    for p in 0..axes.len() - 1 {
        let (a, b) = (axes[p], axes[p + 1]);
        if a == b {
            return Err(Error::invalid(format!("axis {a} repeated consecutively")));
        }
        let key = SubsetKey::pair(a, b)?;
        // The stored key is sorted; a descending pair runs u backwards.
        let reversed = a > b;
        let (ea, eb) = (extents[p], extents[p + 1]);
        let (lo_key, s_key) = if reversed {
            ([eb.0, ea.0], [eb.1 - eb.0, ea.1 - ea.0])
        } else {
            ([ea.0, eb.0], [ea.1 - ea.0, eb.1 - eb.0])
        };
        let gmms: Vec<(f64, &Gmm)> = summary
            .clusters
            .iter()
            .zip(&scales)
            .filter(|(_, &s)| s != 0.0)
            .map(|(cs, &s)| Ok((s, cs.gmm(&key)?)))
            .collect::<Result<_>>()?;
        let mut values = vec![0.0; w * h];
        values.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
            let y = (row as f64 + 0.5) / h as f64;
            for (col, v) in out.iter_mut().enumerate() {
                let u = col as f64 / (w - 1) as f64;
                let uk = if reversed { 1.0 - u } else { u };
                let axis_scale = (1.0 - uk) * s_key[0] + uk * s_key[1];
                *v = gmms
                    .iter()
                    .map(|(s, g)| s * interpolant_density(g, uk, y, lo_key, s_key))
                    .sum::<f64>()
                    / axis_scale;
            }
        });
        panels.push(DensityGrid {
            dims: vec![a, b],
            extent: vec![(0.0, 1.0), (0.0, 1.0)],
            resolution: vec![w, h],
            values,
        });
    }
    Ok(PcpImage {
        axes: axes.to_vec(),
        extents,
        panels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeHistogram {
    pub dim: usize,
    pub extent: (f64, f64),
    pub bins: usize,
    /// `rows[t][b]`: probability mass of bin `b` at timestep `t`.
    pub rows: Vec<Vec<f64>>,
}

/// Probability mass per bin of each timestep's 1D density, integrated
/// exactly from the mixture CDFs so narrow components are not missed.
pub fn time_histogram(
    summaries: &[&Summary],
    dim: usize,
    bins: usize,
    extent: Option<(f64, f64)>,
    doi_per_t: Option<&[DoiVector]>,
) -> Result<TimeHistogram> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::invalid("time histogram needs at least one timestep"))?;
    if summaries.iter().any(|s| s.attributes != first.attributes) {
        return Err(Error::invalid("timesteps do not share an attribute schema"));
    }
    if let Some(d) = doi_per_t {
        if d.len() != summaries.len() {
            return Err(Error::DimensionMismatch {
                expected: summaries.len(),
                actual: d.len(),
            });
        }
    }
    let extent = match extent {
        Some(e) => e,
        None => {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for s in summaries {
                let (a, b) = default_extent(s, dim)?;
                lo = lo.min(a);
                hi = hi.max(b);
            }
            (lo, hi)
        }
    };
    check_extent(extent, bins)?;
    let edges: Vec<f64> = (0..=bins)
        .map(|b| extent.0 + (extent.1 - extent.0) * b as f64 / bins as f64)
        .collect();
    let rows = summaries
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let doi = doi_per_t.map(|d| &d[t]);
            if let Some(d) = doi {
                d.check_len(s.cluster_count())?;
            }
            let weights = s.cluster_weights();
            let mut row = vec![0.0; bins];
            for (c, cs) in s.clusters.iter().enumerate() {
                let scale = weights[c] * doi.map_or(1.0, |d| d.get(c));
                if scale == 0.0 {
                    continue;
                }
                let g = cs.gmm_1d(dim)?;
                let cdf: Vec<f64> = edges.iter().map(|&x| g.cdf_1d_unchecked(x)).collect();
                for (b, v) in row.iter_mut().enumerate() {
                    *v += scale * (cdf[b + 1] - cdf[b]).max(0.0);
                }
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(TimeHistogram {
        dim,
        extent,
        bins,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneMapParams {
    pub gamma: f64,
}

impl ToneMapParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("tone-map gamma {gamma} must be positive")));
        }
        Ok(ToneMapParams { gamma })
    }
}

/// `1 - exp(-gamma rho)`: density read as optical depth.
pub fn tone_map(density: f64, params: ToneMapParams) -> Result<f64> {
    if !(density >= 0.0) {
        return Err(Error::invalid(format!("density {density} is negative")));
    }
    Ok(-(-params.gamma * density).exp_m1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridFormat {
    Json,
    /// Little-endian float32 values plus a `.json` header alongside.
    Raw,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    dims: Vec<usize>,
    extent: Vec<(f64, f64)>,
    resolution: Vec<usize>,
    dtype: String,
    order: String,
}

/// Writes a grid as JSON, or as raw float32 at `path` with the header at
/// `path` + `.json`.
pub fn save_grid(grid: &DensityGrid, path: impl AsRef<Path>, format: GridFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        GridFormat::Json => {
            let json = serde_json::to_vec(grid).map_err(|e| Error::json("grid", e))?;
            std::fs::write(path, json).map_err(|e| Error::io(path, e))
        }
        GridFormat::Raw => {
            let bytes: Vec<u8> = grid.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            let header = RawHeader {
                dims: grid.dims.clone(),
                extent: grid.extent.clone(),
                resolution: grid.resolution.clone(),
                dtype: "float32-le".into(),
                order: "row-major, first axis fastest".into(),
            };
            let mut header_path = path.as_os_str().to_owned();
            header_path.push(".json");
            let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::json("grid header", e))?;
            std::fs::write(&header_path, json).map_err(|e| Error::io(Path::new(&header_path), e))
        }
    }
}
