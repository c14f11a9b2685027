//! Software splatting of 3D Gaussians with closed-form ray integrals and
//! an uncertainty-aware transfer function.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{tone_map, ToneMapParams};
use crate::error::{Error, Result};
use crate::gmm::{Gaussian, Gmm};
use crate::interaction::DoiVector;
use crate::linalg::symmetric_eigen;
use crate::summary::Summary;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

/// Orthonormal camera frame.
#[derive(Debug, Clone, Copy)]
struct Basis {
    eye: Vec3,
    forward: Vec3,
    right: Vec3,
    up: Vec3,
    tan_half: f64,
    aspect: f64,
    width: usize,
    height: usize,
}

/// Points closer than this along the view axis count as behind the eye.
const NEAR: f64 = 1e-9;

impl Camera {
    pub fn validate(&self) -> Result<()> {
        self.basis().map(|_| ())
    }

    fn basis(&self) -> Result<Basis> {
        let finite = |v: Vec3| v.iter().all(|x| x.is_finite());
        if !(finite(self.eye) && finite(self.look_at) && finite(self.up)) {
            return Err(Error::invalid("camera vectors must be finite"));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < std::f64::consts::PI) {
            return Err(Error::invalid(format!("field of view {} outside (0, pi)", self.vertical_fov)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let view = sub(self.look_at, self.eye);
        let len = dot(view, view).sqrt();
        if len == 0.0 {
            return Err(Error::invalid("camera eye and target coincide"));
        }
        let forward = scale(view, 1.0 / len);
        let side = cross(forward, self.up);
        let side_len = dot(side, side).sqrt();
        if side_len <= 1e-12 * dot(self.up, self.up).sqrt() || side_len == 0.0 {
            return Err(Error::invalid("camera up vector is parallel to the view direction"));
        }
        let right = scale(side, 1.0 / side_len);
        Ok(Basis {
            eye: self.eye,
            forward,
            right,
            up: cross(right, forward),
            tan_half: (0.5 * self.vertical_fov).tan(),
            aspect: self.width as f64 / self.height as f64,
            width: self.width,
            height: self.height,
        })
    }

    /// Camera looking at the summary's position centroid from `+z`, far
    /// enough back to frame every cluster's 3-sigma envelope.
    pub fn framing(summary: &Summary, width: usize, height: usize) -> Camera {
        let pos = summary.position_key();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in &summary.clusters {
            if let Some(g) = c.gmms.get(&pos) {
                for (a, (l, h)) in lo.iter_mut().zip(hi.iter_mut()).enumerate() {
                    let (el, eh) = g.envelope(a, 3.0);
                    *l = l.min(el);
                    *h = h.max(eh);
                }
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0; 3];
            hi = [1.0; 3];
        }
        let center: Vec3 = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
        let half: Vec3 = std::array::from_fn(|a| (0.5 * (hi[a] - lo[a])).max(1e-6));
        let fov = 45f64.to_radians();
        let aspect = width.max(1) as f64 / height.max(1) as f64;
        // the box's near face fits the view with a 10% margin
        let fit = half[1].max(half[0] / aspect) * 1.1;
        let dist = fit / (0.5 * fov).tan() + half[2];
        Camera {
            eye: [center[0], center[1], center[2] + dist],
            look_at: center,
            up: [0.0, 1.0, 0.0],
            vertical_fov: fov,
            width,
            height,
        }
    }
}

impl Basis {
    /// Unit direction through the center of pixel `(px, py)`, row 0 on top.
    fn ray(&self, px: usize, py: usize) -> Vec3 {
        let sx = ((px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.tan_half * self.aspect;
        let sy = (1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0) * self.tan_half;
        normalize(add(self.forward, add(scale(self.right, sx), scale(self.up, sy))))
    }

    /// Continuous pixel coordinates of a point in front of the camera.
    fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let d = sub(p, self.eye);
        let z = dot(d, self.forward);
        if z <= NEAR {
            return None;
        }
        let sx = dot(d, self.right) / (z * self.tan_half * self.aspect);
        let sy = dot(d, self.up) / (z * self.tan_half);
        Some((
            (sx + 1.0) * 0.5 * self.width as f64,
            (1.0 - sy) * 0.5 * self.height as f64,
        ))
    }
}

/// `a`, `b`, `c` of the Gaussian restricted to the ray `o + t n`:
/// `N(o + t n) = c exp(-a (t + b/a)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn ray_coeffs(g: &Gaussian, o: Vec3, n: Vec3) -> Result<RayCoeffs> {
    if g.dim() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            actual: g.dim(),
        });
    }
    if (dot(n, n).sqrt() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("ray direction must be a unit vector"));
    }
    Ok(ray_coeffs_unchecked(g, o, n))
}

fn ray_coeffs_unchecked(g: &Gaussian, o: Vec3, n: Vec3) -> RayCoeffs {
    let p = g.inverse();
    let m = g.mean();
    let d = [o[0] - m[0], o[1] - m[1], o[2] - m[2]];
    let pn: Vec3 = std::array::from_fn(|r| p[r * 3] * n[0] + p[r * 3 + 1] * n[1] + p[r * 3 + 2] * n[2]);
    let pd: Vec3 = std::array::from_fn(|r| p[r * 3] * d[0] + p[r * 3 + 1] * d[1] + p[r * 3 + 2] * d[2]);
    let a = 0.5 * dot(n, pn);
    let b = 0.5 * dot(d, pn);
    let q = dot(d, pd);
    let log_norm = -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + g.log_det());
    // the exponent is the minimum along the ray of -q/2, so it is <= 0 up
    // to rounding
    let c = (log_norm + (-0.5 * q + b * b / a).min(0.0)).exp();
    RayCoeffs { a, b, c }
}

/// `int_{-inf}^{inf} N(o + t n) dt = c sqrt(pi / a)`.
pub fn ray_integral_infinite(g: &Gaussian, o: Vec3, n: Vec3) -> Result<f64> {
    let RayCoeffs { a, c, .. } = ray_coeffs(g, o, n)?;
    Ok(c * (std::f64::consts::PI / a).sqrt())
}

/// `erf(x1) - erf(x0)` for `x0 <= x1`, via `erfc` where both lie in one
/// tail to avoid cancellation.
fn erf_diff(x0: f64, x1: f64) -> f64 {
    if x0 >= 0.0 {
        libm::erfc(x0) - libm::erfc(x1)
    } else if x1 <= 0.0 {
        libm::erfc(-x1) - libm::erfc(-x0)
    } else {
        libm::erf(x1) - libm::erf(x0)
    }
}

/// `int_{t0}^{t1} N(o + t n) dt`; infinite bounds are allowed.
pub fn ray_integral_interval(g: &Gaussian, o: Vec3, n: Vec3, t0: f64, t1: f64) -> Result<f64> {
    if t0.is_nan() || t1.is_nan() || t1 < t0 {
        return Err(Error::invalid(format!("interval [{t0}, {t1}] is reversed")));
    }
    let RayCoeffs { a, b, c } = ray_coeffs(g, o, n)?;
    let sa = a.sqrt();
    let shift = b / a;
    let diff = erf_diff(sa * (t0 + shift), sa * (t1 + shift));
    Ok((c * std::f64::consts::PI.sqrt() / sa * 0.5 * diff).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec3,
    /// Unit axes, one per row.
    pub axes: [Vec3; 3],
    pub half_extents: Vec3,
}

impl OrientedBox {
    pub fn corners(&self) -> [Vec3; 8] {
        std::array::from_fn(|i| {
            let mut p = self.center;
            for k in 0..3 {
                let s = if i >> k & 1 == 1 { 1.0 } else { -1.0 };
                p = add(p, scale(self.axes[k], s * self.half_extents[k]));
            }
            p
        })
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let d = sub(p, self.center);
        (0..3).all(|k| dot(d, self.axes[k]).abs() <= self.half_extents[k] * (1.0 + 1e-12))
    }
}

/// Box along the principal axes with half-extents `n_sigma sqrt(lambda)`.
pub fn gaussian_bbox(g: &Gaussian, n_sigma: f64) -> Result<OrientedBox> {
    if g.dim() != 3 {
        return Err(Error::DimensionMismatch {
            expected: 3,
            actual: g.dim(),
        });
    }
    let eig = symmetric_eigen(g.cov(), 3);
    Ok(OrientedBox {
        center: [g.mean()[0], g.mean()[1], g.mean()[2]],
        axes: std::array::from_fn(|k| [eig.vectors[k][0], eig.vectors[k][1], eig.vectors[k][2]]),
        half_extents: std::array::from_fn(|k| n_sigma * eig.values[k].max(0.0).sqrt()),
    })
}

pub type Rgba = [f64; 4];

/// Piecewise-linear map from scalar value to color, constant beyond the
/// end points. Repeated values encode a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub points: Vec<(f64, Rgba)>,
}

impl TransferFunction {
    pub fn new(points: Vec<(f64, Rgba)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("transfer function needs a control point"));
        }
        if points.windows(2).any(|w| !(w[0].0 <= w[1].0)) || points.iter().any(|p| !p.0.is_finite()) {
            return Err(Error::invalid("transfer function values must be finite and sorted"));
        }
        if points.iter().flat_map(|p| p.1).any(|c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::invalid("transfer function colors must lie in [0, 1]"));
        }
        Ok(TransferFunction { points })
    }

    pub fn constant(rgba: Rgba) -> Self {
        TransferFunction {
            points: vec![(0.0, rgba)],
        }
    }

    /// Blue through white to red over `[lo, hi]` with opacity ramping up.
    pub fn ramp(lo: f64, hi: f64) -> Self {
        let mid = 0.5 * (lo + hi);
        TransferFunction {
            points: vec![
                (lo, [0.23, 0.30, 0.75, 0.35]),
                (mid, [0.87, 0.87, 0.87, 0.6]),
                (hi, [0.71, 0.02, 0.15, 1.0]),
            ],
        }
    }

    pub fn eval(&self, x: f64) -> Rgba {
        let pts = &self.points;
        // index of the first point strictly right of x
        let i = pts.partition_point(|p| p.0 <= x);
        if i == 0 {
            return pts[0].1;
        }
        if i == pts.len() {
            return pts[pts.len() - 1].1;
        }
        let (x0, c0) = pts[i - 1];
        let (x1, c1) = pts[i];
        let f = (x - x0) / (x1 - x0);
        std::array::from_fn(|k| c0[k] + f * (c1[k] - c0[k]))
    }
}

/// Expected transfer-function color over `N(mu, sigma^2)`, tabulated on a
/// grid uniform in `mu` and in `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfLut {
    pub mean_range: (f64, f64),
    pub var_range: (f64, f64),
    pub resolution: (usize, usize),
    /// `entries[iv * nm + im]`.
    pub entries: Vec<Rgba>,
}

/// Simpson intervals per TF segment; the default resolution uses at least
/// 256 nodes over the whole `mu +- 8 sigma` window.
const SIMPSON_INTERVALS: usize = 256;
pub const LUT_SIGMAS: f64 = 8.0;

fn simpson(f: impl Fn(f64) -> Rgba, a: f64, b: f64, intervals: usize) -> Rgba {
    let h = (b - a) / intervals as f64;
    let mut acc = [0.0; 4];
    for i in 0..=intervals {
        let w = if i == 0 || i == intervals {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let v = f(a + i as f64 * h);
        for k in 0..4 {
            acc[k] += w * v[k];
        }
    }
    acc.map(|v| v * h / 3.0)
}

/// `int TF(x) N(x; mu, var) dx` over `mu +- 8 sigma`, split at the control
/// points so each Simpson panel integrates a smooth piece.
pub fn tf_expectation(tf: &TransferFunction, mu: f64, var: f64) -> Rgba {
    let sigma = var.sqrt();
    let lo = mu - LUT_SIGMAS * sigma;
    let hi = mu + LUT_SIGMAS * sigma;
    let mut cuts = vec![lo];
    cuts.extend(tf.points.iter().map(|p| p.0).filter(|&x| x > lo && x < hi));
    cuts.push(hi);
    cuts.dedup();
    let mut total = [0.0; 4];
    let f = |x: f64| {
        let w = crate::gmm::normal_pdf(x, mu, var);
        tf.eval(x).map(|c| c * w)
    };
    for w in cuts.windows(2) {
        // evaluate strictly inside a segment so steps at the cuts do not leak
        let (a, b) = (w[0], w[1]);
        let eps = (b - a) * 1e-12;
        let part = simpson(
            |x| f(x.clamp(a + eps, b - eps)),
            a,
            b,
            SIMPSON_INTERVALS,
        );
        for k in 0..4 {
            total[k] += part[k];
        }
    }
    total.map(|v| v.clamp(0.0, 1.0))
}

pub fn build_tf_lut(
    tf: &TransferFunction,
    mean_range: (f64, f64),
    var_range: (f64, f64),
    resolution: (usize, usize),
) -> Result<TfLut> {
    let (nm, nv) = resolution;
    if !(mean_range.0 < mean_range.1 && var_range.0 > 0.0 && var_range.0 < var_range.1)
        || !(mean_range.0.is_finite() && mean_range.1.is_finite() && var_range.1.is_finite())
        || nm < 2
        || nv < 2
    {
        return Err(Error::invalid("lookup-table ranges must be finite, ordered and non-empty"));
    }
    let (s0, s1) = (var_range.0.sqrt(), var_range.1.sqrt());
    let entries = (0..nm * nv)
        .into_par_iter()
        .map(|idx| {
            let (im, iv) = (idx % nm, idx / nm);
            let mu = mean_range.0 + (mean_range.1 - mean_range.0) * im as f64 / (nm - 1) as f64;
            let sigma = s0 + (s1 - s0) * iv as f64 / (nv - 1) as f64;
            tf_expectation(tf, mu, sigma * sigma)
        })
        .collect();
    Ok(TfLut {
        mean_range,
        var_range,
        resolution,
        entries,
    })
}

impl TfLut {
    /// Bilinear lookup; the flag reports whether the query was clamped into
    /// the table's range.
    pub fn lookup(&self, mu: f64, var: f64) -> (Rgba, bool) {
        let (nm, nv) = self.resolution;
        let (s0, s1) = (self.var_range.0.sqrt(), self.var_range.1.sqrt());
        let fm = (mu - self.mean_range.0) / (self.mean_range.1 - self.mean_range.0) * (nm - 1) as f64;
        let fv = (var.max(0.0).sqrt() - s0) / (s1 - s0) * (nv - 1) as f64;
        let clamped = !(0.0..=(nm - 1) as f64).contains(&fm) || !(0.0..=(nv - 1) as f64).contains(&fv);
        let fm = fm.clamp(0.0, (nm - 1) as f64);
        let fv = fv.clamp(0.0, (nv - 1) as f64);
        let (im, iv) = ((fm as usize).min(nm - 2), (fv as usize).min(nv - 2));
        let (tm, tv) = (fm - im as f64, fv - iv as f64);
        let e = |m: usize, v: usize| self.entries[v * nm + m];
        let out = std::array::from_fn(|k| {
            (1.0 - tv) * ((1.0 - tm) * e(im, iv)[k] + tm * e(im + 1, iv)[k])
                + tv * ((1.0 - tm) * e(im, iv + 1)[k] + tm * e(im + 1, iv + 1)[k])
        });
        (out, clamped)
    }

    /// Table spanning every component of one dimension's 1D models.
    pub fn for_dimension(tf: &TransferFunction, summary: &Summary, dim: usize, resolution: (usize, usize)) -> Result<TfLut> {
        summary.check_dim(dim)?;
        let mut mr = (f64::INFINITY, f64::NEG_INFINITY);
        let mut vr = (f64::INFINITY, f64::NEG_INFINITY);
        for c in &summary.clusters {
            for g in c.gmm_1d(dim)?.components() {
                mr = (mr.0.min(g.mean()[0]), mr.1.max(g.mean()[0]));
                vr = (vr.0.min(g.variance(0)), vr.1.max(g.variance(0)));
            }
        }
        if !mr.0.is_finite() {
            mr = (0.0, 1.0);
            vr = (1.0, 2.0);
        }
        let mpad = (mr.1 - mr.0).max(mr.0.abs().max(1.0) * 1e-6) * 0.01;
        let vr = (vr.0 * 0.5, vr.1 * 2.0);
        build_tf_lut(tf, (mr.0 - mpad, mr.1 + mpad), vr, resolution)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectedColor {
    pub rgba: Rgba,
    /// Components whose parameters fell outside the table.
    pub clamped: usize,
}

/// `sum_j w_j E[TF | N(mu_j, sigma_j^2)]` from the lookup table.
pub fn expected_tf(gmm1: &Gmm, lut: &TfLut) -> Result<ExpectedColor> {
    if gmm1.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: gmm1.dim(),
        });
    }
    let mut rgba = [0.0; 4];
    let mut clamped = 0;
    for g in gmm1.components() {
        let (c, cl) = lut.lookup(g.mean()[0], g.variance(0));
        clamped += cl as usize;
        for k in 0..4 {
            rgba[k] += g.weight() * c[k];
        }
    }
    Ok(ExpectedColor { rgba, clamped })
}

/// Rec. 709 luminance.
pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// `gray + doi (color - gray)`.
pub fn desaturate(rgb: [f64; 3], doi: f64) -> [f64; 3] {
    let gray = luminance(rgb);
    rgb.map(|c| gray + doi * (c - gray))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplatOptions {
    pub n_sigma: f64,
    pub background: Rgba,
    /// Raw sample positions drawn as opaque pixels over the splats.
    pub points: Vec<Vec3>,
    pub point_color: Rgba,
}

impl Default for SplatOptions {
    fn default() -> Self {
        SplatOptions {
            n_sigma: 3.0,
            background: [0.0, 0.0, 0.0, 1.0],
            points: Vec::new(),
            point_color: [1.0, 1.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderFrame {
    pub width: usize,
    pub height: usize,
    /// RGBA8, rows top to bottom.
    pub pixels: Vec<u8>,
    /// Composited RGBA before quantization.
    pub accum: Vec<f32>,
    pub camera: Camera,
    pub tone: ToneMapParams,
    /// Component colors looked up outside the TF table's range.
    pub lut_clamped: usize,
}

/// One splat in compositing order.
#[derive(Debug, Clone)]
pub struct Splat {
    pub cluster: usize,
    pub component: usize,
    pub depth: f64,
    pub gaussian: Gaussian,
    /// `gamma * w_j * |C| / N * alpha_TF`: optical depth per unit ray integral.
    pub optical_scale: f64,
    pub rgb: [f64; 3],
    /// Pixel rectangle `[x0, x1) x [y0, y1)`.
    pub rect: (usize, usize, usize, usize),
}

/// Largest ray integral of a unit-weight Gaussian over all view directions:
/// looking down the major axis, `1 / (2 pi sqrt(l2 l3))`.
pub fn peak_column_density(g: &Gaussian) -> f64 {
    let eig = symmetric_eigen(g.cov(), 3);
    1.0 / (2.0 * std::f64::consts::PI * (eig.values[1] * eig.values[2]).max(f64::MIN_POSITIVE).sqrt())
}

/// Gamma at which the median splat reaches opacity 1/2 at its core when
/// seen end-on (TF opacity taken as 1). Falls back to 1 for empty summaries.
pub fn auto_gamma(summary: &Summary) -> f64 {
    let pos = summary.position_key();
    let weights = summary.cluster_weights();
    let mut depths: Vec<f64> = summary
        .clusters
        .iter()
        .zip(&weights)
        .filter_map(|(c, w)| c.gmms.get(&pos).map(|g| (g, *w)))
        .flat_map(|(g, w)| g.components().iter().map(move |c| w * c.weight() * peak_column_density(c)))
        .filter(|d| d.is_finite() && *d > 0.0)
        .collect();
    if depths.is_empty() {
        return 1.0;
    }
    depths.sort_by(f64::total_cmp);
    std::f64::consts::LN_2 / depths[depths.len() / 2]
}

/// Back-to-front list of splats for a frame.
pub fn prepare_splats(
    summary: &Summary,
    camera: &Camera,
    lut: &TfLut,
    color_dim: usize,
    doi: Option<&DoiVector>,
    tone: ToneMapParams,
    n_sigma: f64,
) -> Result<(Vec<Splat>, usize)> {
    let basis = camera.basis()?;
    summary.check_dim(color_dim)?;
    if let Some(d) = doi {
        d.check_len(summary.cluster_count())?;
    }
    let pos = summary.position_key();
    let weights = summary.cluster_weights();
    let mut splats = Vec::new();
    let mut clamped = 0;
    for (ci, cs) in summary.clusters.iter().enumerate() {
        let focus = doi.map_or(1.0, |d| d.get(ci));
        let color = expected_tf(cs.gmm_1d(color_dim)?, lut)?;
        clamped += color.clamped;
        let rgb = desaturate([color.rgba[0], color.rgba[1], color.rgba[2]], focus);
        for (j, g) in cs.gmm(&pos)?.components().iter().enumerate() {
            let bbox = gaussian_bbox(g, n_sigma)?;
            let mut rect = (0, basis.width, 0, basis.height);
            let projected: Option<Vec<(f64, f64)>> = bbox.corners().iter().map(|&p| basis.project(p)).collect();
            // a corner behind the eye makes the projection unbounded; cover
            // the whole screen instead
            if let Some(pts) = projected {
                let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                for (x, y) in pts {
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                }
                let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
                rect = (
                    clip(x0.floor(), basis.width),
                    clip(x1.ceil(), basis.width),
                    clip(y0.floor(), basis.height),
                    clip(y1.ceil(), basis.height),
                );
            }
            if rect.0 >= rect.1 || rect.2 >= rect.3 {
                continue;
            }
            let m = g.mean();
            let d = sub([m[0], m[1], m[2]], basis.eye);
            splats.push(Splat {
                cluster: ci,
                component: j,
                depth: dot(d, d).sqrt(),
                gaussian: g.clone(),
                optical_scale: tone.gamma * g.weight() * weights[ci] * color.rgba[3],
                rgb,
                rect,
            });
        }
    }
    splats.sort_by(|a, b| {
        b.depth
            .total_cmp(&a.depth)
            .then(a.cluster.cmp(&b.cluster))
            .then(a.component.cmp(&b.component))
    });
    Ok((splats, clamped))
}

/// Renders every cluster's position mixture back to front. Each splat's
/// opacity is the tone-mapped ray integral through the pixel center.
pub fn splat_frame(
    summary: &Summary,
    camera: &Camera,
    lut: &TfLut,
    color_dim: usize,
    doi: Option<&DoiVector>,
    tone: ToneMapParams,
    opts: &SplatOptions,
) -> Result<RenderFrame> {
    let basis = camera.basis()?;
    let (splats, lut_clamped) = prepare_splats(summary, camera, lut, color_dim, doi, tone, opts.n_sigma)?;
    let (w, h) = (basis.width, basis.height);
    let unit = ToneMapParams { gamma: 1.0 };
    let mut accum = vec![0f32; w * h * 4];
    accum.par_chunks_mut(w * 4).enumerate().for_each(|(py, row)| {
        let active: Vec<&Splat> = splats.iter().filter(|s| s.rect.2 <= py && py < s.rect.3).collect();
        for px in 0..w {
            let mut c = opts.background;
            let n = basis.ray(px, py);
            for s in active.iter().filter(|s| s.rect.0 <= px && px < s.rect.1) {
                let RayCoeffs { a, c: cc, .. } = ray_coeffs_unchecked(&s.gaussian, basis.eye, n);
                let g = cc * (std::f64::consts::PI / a).sqrt();
                let alpha = tone_map(s.optical_scale * g, unit).unwrap_or(0.0);
                for k in 0..3 {
                    c[k] = alpha * s.rgb[k] + (1.0 - alpha) * c[k];
                }
                c[3] = alpha + (1.0 - alpha) * c[3];
            }
            for k in 0..4 {
                row[px * 4 + k] = c[k] as f32;
            }
        }
    });
    for p in &opts.points {
        if let Some((x, y)) = basis.project(*p) {
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                let i = (y as usize * w + x as usize) * 4;
                for k in 0..4 {
                    accum[i + k] = opts.point_color[k] as f32;
                }
            }
        }
    }
    let pixels = accum.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RenderFrame {
        width: w,
        height: h,
        pixels,
        accum,
        camera: *camera,
        tone,
        lut_clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> ImageFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "image/x-portable-pixmap",
            ImageFormat::Png => "image/png",
        }
    }
}

/// Binary PPM: `P6\n<w> <h>\n255\n` then RGB triples, alpha dropped.
pub fn encode_ppm(frame: &RenderFrame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.reserve(frame.width * frame.height * 3);
    for px in frame.pixels.chunks_exact(4) {
        out.extend_from_slice(&px[..3]);
    }
    out
}

pub fn encode_png(frame: &RenderFrame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
        writer
            .write_image_data(&frame.pixels)
            .map_err(|e| Error::invalid(format!("PNG encoding failed: {e}")))?;
    }
    Ok(out)
}

pub fn encode_image(frame: &RenderFrame, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Ppm => Ok(encode_ppm(frame)),
        ImageFormat::Png => encode_png(frame),
    }
}

pub fn write_image(frame: &RenderFrame, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(frame, format)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Width, height and RGB bytes of a binary PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Corrupt("truncated PPM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Corrupt(format!("bad PPM field {s:?}")));
    if fields[0] != "P6" || num(&fields[3])? != 255 {
        return Err(Error::Corrupt("only 8-bit binary PPM is supported".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| Error::Corrupt("truncated PPM data".into()))?;
    Ok((w, h, data.to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
