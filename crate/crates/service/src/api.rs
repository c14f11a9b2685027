//! HTTP/JSON API under `/api`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gmmscope_core::density::{
    default_extent, density_1d, density_2d, pcp_image, time_histogram, ToneMapParams, ViewSource,
};
use gmmscope_core::interaction::{Brush, CombineMode, DoiVector};
use gmmscope_core::metrics::error_report;
use gmmscope_core::render::{auto_gamma, encode_image, splat_frame, Camera, ImageFormat, SplatOptions, TfLut, TransferFunction};
use gmmscope_core::summary::Summary;
use gmmscope_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::CorsLayer;

use crate::state::{evaluate_brushes, ActiveBrush, AppState};

pub const DEFAULT_FRAME_SIZE: (usize, usize) = (1920, 1080);
const DEFAULT_BINS: usize = 200;
const DEFAULT_GRID: (usize, usize) = (200, 200);
const DEFAULT_PCP: (usize, usize) = (800, 300);
const MAX_CELLS: usize = 16_000_000;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: msg.into(),
        }
    }

    fn conflict(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            message: msg.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidDimension { .. } | Error::MissingKey(_) => StatusCode::NOT_FOUND,
            Error::Io { .. } | Error::Corrupt(_) | Error::Version { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/summary", get(summary_info))
        .route("/api/density1d", get(density1d))
        .route("/api/density2d", get(density2d))
        .route("/api/pcp", get(pcp))
        .route("/api/timehist", get(timehist))
        .route("/api/brush", post(add_brush).delete(clear_brush))
        .route("/api/frame", get(frame))
        .route("/api/timestep", post(timestep))
        .route("/api/lod", post(lod))
        .route("/api/errors", get(errors))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Parses a JSON body, mapping every failure to 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn parse_list(s: &str, what: &str) -> ApiResult<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| ApiError::bad_request(format!("{what} must be a comma-separated index list")))
}

fn check_cells(cells: usize) -> ApiResult<()> {
    if cells == 0 || cells > MAX_CELLS {
        return Err(ApiError::bad_request(format!("grid size must lie in 1..={MAX_CELLS} cells")));
    }
    Ok(())
}

fn extent_param(lo: Option<f64>, hi: Option<f64>, summary: &Summary, dim: usize) -> ApiResult<(f64, f64)> {
    let (dlo, dhi) = default_extent(summary, dim)?;
    Ok((lo.unwrap_or(dlo), hi.unwrap_or(dhi)))
}

/// Current summary, DOI and (frame-0 only) LOD overlay snapshot.
struct View<'a> {
    summary: &'a Summary,
    doi: DoiVector,
    lod: Option<gmmscope_core::interaction::LodOverlay>,
}

fn view(state: &AppState) -> View<'_> {
    let s = state.lock();
    View {
        summary: &state.summaries[s.timestep],
        doi: s.doi.clone(),
        lod: s.lod.clone(),
    }
}

impl View<'_> {
    fn source(&self) -> ViewSource<'_> {
        ViewSource {
            summary: self.summary,
            lod: self.lod.as_ref(),
        }
    }
}

#[derive(Serialize)]
struct SummaryInfo<'a> {
    attributes: &'a [gmmscope_core::dataset::AttributeSpec],
    dims: Vec<String>,
    cluster_count: usize,
    n_total: usize,
    cluster_sizes: Vec<usize>,
    extents: Vec<(f64, f64)>,
    mean_wasserstein: f64,
    timesteps: usize,
    timestep: usize,
    mean_doi: f64,
    lod_available: bool,
}

async fn summary_info(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let v = view(&state);
    let s = v.summary;
    let info = SummaryInfo {
        attributes: &s.attributes,
        dims: s.dim_names(),
        cluster_count: s.cluster_count(),
        n_total: s.n_total,
        cluster_sizes: s.clusters.iter().map(|c| c.count).collect(),
        extents: (0..s.m()).map(|d| default_extent(s, d)).collect::<Result<_, _>>()?,
        mean_wasserstein: s.mean_wasserstein(),
        timesteps: state.summaries.len(),
        timestep: state.lock().timestep,
        mean_doi: v.doi.mean(),
        lod_available: state.raw.is_some(),
    };
    Ok(Json(serde_json::to_value(info).expect("plain data serializes")))
}

#[derive(Deserialize)]
struct Density1dQuery {
    dim: usize,
    bins: Option<usize>,
    lo: Option<f64>,
    hi: Option<f64>,
}

async fn density1d(State(state): State<Arc<AppState>>, Query(q): Query<Density1dQuery>) -> ApiResult<Response> {
    let v = view(&state);
    v.summary.check_dim(q.dim)?;
    let bins = q.bins.unwrap_or(DEFAULT_BINS);
    check_cells(bins)?;
    let extent = extent_param(q.lo, q.hi, v.summary, q.dim)?;
    let grid = density_1d(v.source(), q.dim, extent, bins, Some(&v.doi))?;
    Ok(Json(grid).into_response())
}

#[derive(Deserialize)]
struct Density2dQuery {
    dims: String,
    w: Option<usize>,
    h: Option<usize>,
}

async fn density2d(State(state): State<Arc<AppState>>, Query(q): Query<Density2dQuery>) -> ApiResult<Response> {
    let v = view(&state);
    let dims = parse_list(&q.dims, "dims")?;
    let [i, j] = dims[..] else {
        return Err(ApiError::bad_request("dims must name exactly two dimensions"));
    };
    if i == j {
        return Err(ApiError::bad_request("dims must be distinct"));
    }
    v.summary.check_dim(i)?;
    v.summary.check_dim(j)?;
    let res = (q.w.unwrap_or(DEFAULT_GRID.0), q.h.unwrap_or(DEFAULT_GRID.1));
    check_cells(res.0.saturating_mul(res.1))?;
    let extent = (default_extent(v.summary, i)?, default_extent(v.summary, j)?);
    let grid = density_2d(v.source(), (i, j), extent, res, Some(&v.doi))?;
    Ok(Json(grid).into_response())
}

#[derive(Deserialize)]
struct PcpQuery {
    axes: Option<String>,
    w: Option<usize>,
    h: Option<usize>,
}

async fn pcp(State(state): State<Arc<AppState>>, Query(q): Query<PcpQuery>) -> ApiResult<Response> {
    let v = view(&state);
    let axes = match &q.axes {
        Some(a) => parse_list(a, "axes")?,
        None => (0..v.summary.m()).collect(),
    };
    if axes.len() < 2 {
        return Err(ApiError::bad_request("at least two axes are required"));
    }
    for &a in &axes {
        v.summary.check_dim(a)?;
    }
    let res = (q.w.unwrap_or(DEFAULT_PCP.0), q.h.unwrap_or(DEFAULT_PCP.1));
    check_cells(res.0.saturating_mul(res.1).saturating_mul(axes.len() - 1))?;
    let img = pcp_image(v.summary, &axes, None, res, Some(&v.doi))?;
    Ok(Json(img).into_response())
}

#[derive(Deserialize)]
struct TimehistQuery {
    dim: usize,
    bins: Option<usize>,
}

async fn timehist(State(state): State<Arc<AppState>>, Query(q): Query<TimehistQuery>) -> ApiResult<Response> {
    let bins = q.bins.unwrap_or(DEFAULT_BINS);
    check_cells(bins.saturating_mul(state.summaries.len()))?;
    state.summaries[0].check_dim(q.dim)?;
    let brushes = state.lock().brushes.clone();
    // brushes are value ranges, so they are re-evaluated on every frame
    let dois = state
        .summaries
        .iter()
        .map(|s| evaluate_brushes(s, &brushes))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&Summary> = state.summaries.iter().collect();
    let hist = time_histogram(&refs, q.dim, bins, None, Some(&dois))?;
    Ok(Json(hist).into_response())
}

#[derive(Deserialize)]
struct BrushRequest {
    dim: usize,
    a: f64,
    b: f64,
    #[serde(default = "default_mode")]
    mode: CombineMode,
}

fn default_mode() -> CombineMode {
    CombineMode::And
}

fn doi_response(state: &AppState) -> Json<Value> {
    let s = state.lock();
    Json(json!({
        "doi": s.doi.values(),
        "mean_doi": s.doi.mean(),
        "brushes": s.brushes,
        "timestep": s.timestep,
    }))
}

async fn add_brush(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: BrushRequest = parse_body(&body)?;
    let brush = Brush::new(req.dim, req.a, req.b).map_err(|e| ApiError::bad_request(e.to_string()))?;
    {
        let mut s = state.lock();
        let summary = &state.summaries[s.timestep];
        summary.check_dim(req.dim)?;
        s.add_brush(summary, ActiveBrush { brush, mode: req.mode })?;
        if let (Some(th), 0) = (s.lod_threshold, s.timestep) {
            s.refresh_lod(&state, th)?;
        }
    }
    Ok(doi_response(&state))
}

async fn clear_brush(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    {
        let mut s = state.lock();
        let summary = &state.summaries[s.timestep];
        s.clear_brushes(summary);
        if let (Some(th), 0) = (s.lod_threshold, s.timestep) {
            s.refresh_lod(&state, th)?;
        }
    }
    Ok(doi_response(&state))
}

#[derive(Deserialize)]
struct TimestepRequest {
    t: usize,
}

async fn timestep(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    if !state.is_series() {
        return Err(ApiError::conflict("no time series is loaded"));
    }
    let req: TimestepRequest = parse_body(&body)?;
    if req.t >= state.summaries.len() {
        return Err(ApiError::bad_request(format!(
            "timestep {} outside 0..{}",
            req.t,
            state.summaries.len()
        )));
    }
    state.lock().move_to(&state, req.t)?;
    Ok(doi_response(&state))
}

#[derive(Deserialize)]
struct LodRequest {
    /// `null` disables substitution.
    threshold: Option<f64>,
}

async fn lod(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: LodRequest = parse_body(&body)?;
    if state.raw.is_none() {
        return Err(ApiError::conflict("LOD substitution needs the raw dataset"));
    }
    let mut s = state.lock();
    match req.threshold {
        None => {
            s.lod_threshold = None;
            s.lod = None;
        }
        Some(th) if th.is_nan() || th < 0.0 => {
            return Err(ApiError::bad_request("threshold must be non-negative"));
        }
        Some(th) => {
            s.lod_threshold = Some(th);
            if s.timestep == 0 {
                s.refresh_lod(&state, th)?;
            }
        }
    }
    let substituted = s.lod.as_ref().map(|l| l.substituted()).unwrap_or_default();
    Ok(Json(json!({ "threshold": s.lod_threshold, "substituted": substituted })))
}

#[derive(Deserialize)]
struct FrameQuery {
    /// JSON-encoded camera; defaults to a framing of the whole summary.
    camera: Option<String>,
    /// JSON-encoded transfer function; defaults to a ramp over the color
    /// dimension.
    tf: Option<String>,
    gamma: Option<f64>,
    color_dim: Option<usize>,
    w: Option<usize>,
    h: Option<usize>,
    format: Option<ImageFormat>,
}

async fn frame(State(state): State<Arc<AppState>>, Query(q): Query<FrameQuery>) -> ApiResult<Response> {
    let v = view(&state);
    let s = v.summary;
    let (w, h) = (
        q.w.unwrap_or(DEFAULT_FRAME_SIZE.0),
        q.h.unwrap_or(DEFAULT_FRAME_SIZE.1),
    );
    check_cells(w.saturating_mul(h))?;
    let camera = match &q.camera {
        Some(c) => {
            let mut cam: Camera =
                serde_json::from_str(c).map_err(|e| ApiError::bad_request(format!("malformed camera: {e}")))?;
            // explicit w/h win over the camera's own size
            cam.width = q.w.unwrap_or(cam.width);
            cam.height = q.h.unwrap_or(cam.height);
            check_cells(cam.width.saturating_mul(cam.height))?;
            cam
        }
        None => Camera::framing(s, w, h),
    };
    camera.validate()?;
    let color_dim = q.color_dim.unwrap_or(0);
    s.check_dim(color_dim)?;
    let tf = match &q.tf {
        Some(t) => {
            let tf: TransferFunction =
                serde_json::from_str(t).map_err(|e| ApiError::bad_request(format!("malformed transfer function: {e}")))?;
            TransferFunction::new(tf.points)?
        }
        None => {
            let (lo, hi) = default_extent(s, color_dim)?;
            TransferFunction::ramp(lo, hi)
        }
    };
    let tone = ToneMapParams::new(q.gamma.unwrap_or_else(|| auto_gamma(s)))?;
    let lut = TfLut::for_dimension(&tf, s, color_dim, (64, 64))?;
    let frame = splat_frame(s, &camera, &lut, color_dim, Some(&v.doi), tone, &SplatOptions::default())?;
    let format = q.format.unwrap_or(ImageFormat::Png);
    let bytes = encode_image(&frame, format)?;
    Ok(([(header::CONTENT_TYPE, format.mime())], bytes).into_response())
}

async fn errors(State(state): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let v = view(&state);
    Ok(Json(serde_json::to_value(error_report(v.summary)).expect("plain data serializes")))
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
