//! Compact per-cluster Gaussian mixture summaries of large scattered
//! multivariate datasets, plus the density views, uncertainty metrics,
//! splatting renderer and brushing machinery that operate on them.

pub mod dataset;
pub mod density;
pub mod error;
pub mod fitting;
pub mod gmm;
pub mod interaction;
pub mod linalg;
pub mod metrics;
pub mod render;
pub mod seed;
pub mod summary;

pub use error::{Error, Result};
pub use gmm::{Gaussian, Gmm};
