#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use gmmscope_core::dataset::{generate_synthetic, Clustering, Dataset};
use gmmscope_core::fitting::FitConfig;
use gmmscope_core::summary::{build_summary, Summary};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

/// Every `stride`-th row of the synthetic dataset, labels included.
pub fn thinned_synthetic(seed: u64, stride: usize) -> (Dataset, Clustering) {
    let (ds, cl) = generate_synthetic(seed);
    let rows: Vec<usize> = (0..ds.n()).step_by(stride).collect();
    let columns = (0..ds.m())
        .map(|d| rows.iter().map(|&r| ds.value(r, d)).collect())
        .collect();
    let labels: Vec<u32> = rows.iter().map(|&r| cl.labels()[r]).collect();
    (
        Dataset::new(ds.attributes().to_vec(), columns).unwrap(),
        Clustering::from_labels(&labels).unwrap(),
    )
}

pub fn small_summary(seed: u64) -> (Summary, Dataset, Clustering) {
    let (ds, cl) = thinned_synthetic(seed, 50);
    let config = FitConfig {
        max_components: 3,
        seed,
        ..FitConfig::default()
    };
    let s = build_summary(&ds, &cl, &config, None).unwrap();
    (s, ds, cl)
}

pub async fn send(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

pub async fn post_json(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, "POST", uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Composite Simpson integral of `f` over `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}
