//! Scattered multivariate datasets, cluster labelings and time series of
//! both.
//!
//! On disk a dataset is a JSON manifest plus one raw little-endian `f32`
//! file per attribute component; see [`load_dataset`] and [`save_dataset`].

pub(crate) mod kmeans;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kmeans::{kmeans, kmeans_cluster, KMeansResult, KMEANS_MAX_ITERS};
pub use synthetic::{
    generate_synthetic, generate_synthetic_detailed, SyntheticDataset, SYNTHETIC_CLUSTERS,
    SYNTHETIC_NOISE_FRACTION, SYNTHETIC_POINTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Position,
    Vector,
    Scalar,
}

impl AttributeKind {
    pub fn components(self) -> usize {
        match self {
            AttributeKind::Position | AttributeKind::Vector => 3,
            AttributeKind::Scalar => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub components: usize,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, kind: AttributeKind) -> Self {
        AttributeSpec {
            name: name.into(),
            kind,
            components: kind.components(),
        }
    }

    /// Display name of one component, e.g. `velocity.y` or `pressure`.
    pub fn component_name(&self, c: usize) -> String {
        if self.components == 1 {
            self.name.clone()
        } else {
            format!("{}.{}", self.name, ["x", "y", "z"][c])
        }
    }
}

/// Checks the attribute list invariants and returns the total linear
/// dimension `m`.
pub fn validate_attributes(attributes: &[AttributeSpec]) -> Result<usize> {
    let positions = attributes
        .iter()
        .filter(|a| a.kind == AttributeKind::Position)
        .count();
    if positions != 1 {
        return Err(Error::invalid(format!(
            "expected exactly one position attribute, found {positions}"
        )));
    }
    for a in attributes {
        if a.components != a.kind.components() {
            return Err(Error::invalid(format!(
                "attribute `{}` of kind {:?} must have {} components, not {}",
                a.name,
                a.kind,
                a.kind.components(),
                a.components
            )));
        }
    }
    Ok(attributes.iter().map(|a| a.components).sum())
}

/// Columnar scattered samples. Values are kept in `f64`; files store `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    attributes: Vec<AttributeSpec>,
    columns: Vec<Vec<f64>>,
}

impl Dataset {
    /// Builds a dataset from one column per linear dimension, in attribute
    /// order.
    pub fn new(attributes: Vec<AttributeSpec>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let m = validate_attributes(&attributes)?;
        if columns.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: columns.len(),
            });
        }
        let n = columns.first().map_or(0, Vec::len);
        let mut dim = 0;
        for a in &attributes {
            for c in 0..a.components {
                let col = &columns[dim];
                if col.len() != n {
                    return Err(Error::LengthMismatch {
                        attribute: a.component_name(c),
                        expected: n,
                        actual: col.len(),
                    });
                }
                if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        attribute: a.component_name(c),
                        row,
                    });
                }
                dim += 1;
            }
        }
        Ok(Dataset {
            n,
            attributes,
            columns,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Total linear dimension `3V + S` (position included in `V`).
    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn column(&self, dim: usize) -> &[f64] {
        &self.columns[dim]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn value(&self, row: usize, dim: usize) -> f64 {
        self.columns[dim][row]
    }

    /// Linear dimension names, one per column.
    pub fn dim_names(&self) -> Vec<String> {
        dim_names(&self.attributes)
    }

    /// Linear dimension triples of the position and vector attributes.
    pub fn vector_triples(&self) -> Vec<[usize; 3]> {
        vector_triples(&self.attributes)
    }

    pub fn position_dims(&self) -> [usize; 3] {
        position_dims(&self.attributes)
    }

    /// Gathers the given rows and dimensions into a row-major matrix.
    pub fn gather(&self, rows: &[usize], dims: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * dims.len());
        for &r in rows {
            for &d in dims {
                out.push(self.columns[d][r]);
            }
        }
        out
    }
}

pub fn dim_names(attributes: &[AttributeSpec]) -> Vec<String> {
    attributes
        .iter()
        .flat_map(|a| (0..a.components).map(move |c| a.component_name(c)))
        .collect()
}

pub fn vector_triples(attributes: &[AttributeSpec]) -> Vec<[usize; 3]> {
    let mut dim = 0;
    let mut out = Vec::new();
    for a in attributes {
        if a.components == 3 {
            out.push([dim, dim + 1, dim + 2]);
        }
        dim += a.components;
    }
    out
}

pub fn position_dims(attributes: &[AttributeSpec]) -> [usize; 3] {
    let mut dim = 0;
    for a in attributes {
        if a.kind == AttributeKind::Position {
            return [dim, dim + 1, dim + 2];
        }
        dim += a.components;
    }
    panic!("attribute list has no position attribute")
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestAttribute {
    name: String,
    kind: AttributeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    files: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n: usize,
    attributes: Vec<ManifestAttribute>,
}

/// Default column file name for component `c` of an attribute.
pub fn default_column_file(attr: &AttributeSpec, c: usize) -> String {
    format!("{}.f32", attr.component_name(c))
}

fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn write_f32_file(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a dataset from its JSON manifest. Column files are resolved
/// relative to the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let attributes: Vec<AttributeSpec> = manifest
        .attributes
        .iter()
        .map(|a| AttributeSpec::new(&a.name, a.kind))
        .collect();
    validate_attributes(&attributes)?;

    let mut columns = Vec::new();
    for (spec, entry) in attributes.iter().zip(&manifest.attributes) {
        let files: Vec<PathBuf> = match &entry.files {
            Some(files) => {
                if files.len() != spec.components {
                    return Err(Error::invalid(format!(
                        "attribute `{}` lists {} files for {} components",
                        spec.name,
                        files.len(),
                        spec.components
                    )));
                }
                files.iter().map(|f| base.join(f)).collect()
            }
            None => (0..spec.components)
                .map(|c| base.join(default_column_file(spec, c)))
                .collect(),
        };
        for (c, file) in files.iter().enumerate() {
            let col = read_f32_file(file)?;
            if col.len() != manifest.n {
                return Err(Error::LengthMismatch {
                    attribute: spec.component_name(c),
                    expected: manifest.n,
                    actual: col.len(),
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    attribute: spec.component_name(c),
                    row,
                });
            }
            columns.push(col);
        }
    }
    if manifest.n == 0 {
        return Err(Error::invalid("dataset declares zero samples"));
    }
    Dataset::new(attributes, columns)
}

/// Writes `manifest.json` plus one `f32` column file per component into
/// `dir`, returning the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut dim = 0;
    let mut entries = Vec::new();
    for a in &dataset.attributes {
        let mut files = Vec::new();
        for c in 0..a.components {
            let file = default_column_file(a, c);
            write_f32_file(&dir.join(&file), &dataset.columns[dim])?;
            files.push(file);
            dim += 1;
        }
        entries.push(ManifestAttribute {
            name: a.name.clone(),
            kind: a.kind,
            files: Some(files),
        });
    }
    let manifest = Manifest {
        n: dataset.n,
        attributes: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("manifest", e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// A partition of the samples into densely numbered clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    labels: Vec<u32>,
    cluster_count: usize,
    index_sets: Vec<Vec<usize>>,
}

impl Clustering {
    /// Compacts arbitrary non-negative labels to `0..k`, preserving the
    /// order of the original ids.
    pub fn from_labels<L: Copy + Into<i64>>(labels: &[L]) -> Result<Self> {
        let raw: Vec<i64> = labels.iter().map(|&l| l.into()).collect();
        if let Some((row, &label)) = raw.iter().enumerate().find(|(_, &l)| l < 0) {
            return Err(Error::NegativeLabel { label, row });
        }
        let mut ids = raw.clone();
        ids.sort_unstable();
        ids.dedup();
        let labels: Vec<u32> = raw
            .iter()
            .map(|l| ids.binary_search(l).expect("label present") as u32)
            .collect();
        let mut index_sets = vec![Vec::new(); ids.len()];
        for (i, &l) in labels.iter().enumerate() {
            index_sets[l as usize].push(i);
        }
        Ok(Clustering {
            labels,
            cluster_count: ids.len(),
            index_sets,
        })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_count
    }

    pub fn index_sets(&self) -> &[Vec<usize>] {
        &self.index_sets
    }

    pub fn members(&self, cluster: usize) -> &[usize] {
        &self.index_sets[cluster]
    }
}

/// Loads little-endian `u32` labels (`.u32`/`.bin`) or a JSON integer
/// array (`.json`) and checks them against the dataset.
pub fn load_clustering(path: impl AsRef<Path>, dataset: &Dataset) -> Result<Clustering> {
    let path = path.as_ref();
    let clustering = if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let labels: Vec<i64> =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        check_label_count(labels.len(), dataset)?;
        Clustering::from_labels(&labels)?
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::invalid(format!(
                "{} is not a whole number of u32 labels",
                path.display()
            )));
        }
        let labels: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        check_label_count(labels.len(), dataset)?;
        Clustering::from_labels(&labels)?
    };
    Ok(clustering)
}

fn check_label_count(len: usize, dataset: &Dataset) -> Result<()> {
    if len != dataset.n() {
        return Err(Error::LengthMismatch {
            attribute: "labels".into(),
            expected: dataset.n(),
            actual: len,
        });
    }
    Ok(())
}

pub fn save_clustering(clustering: &Clustering, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(clustering.len() * 4);
    for &l in &clustering.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Frames of a time-dependent dataset with its per-frame clustering.
#[derive(Debug, Clone)]
pub struct TimeSeries {
    frames: Vec<(Dataset, Clustering)>,
}

impl TimeSeries {
    pub fn new(frames: Vec<(Dataset, Clustering)>) -> Result<Self> {
        if let Some((first, _)) = frames.first() {
            for (t, (ds, cl)) in frames.iter().enumerate() {
                if ds.attributes() != first.attributes() {
                    return Err(Error::invalid(format!(
                        "frame {t} has a different attribute schema"
                    )));
                }
                if cl.len() != ds.n() {
                    return Err(Error::LengthMismatch {
                        attribute: format!("labels of frame {t}"),
                        expected: ds.n(),
                        actual: cl.len(),
                    });
                }
            }
        }
        Ok(TimeSeries { frames })
    }

    pub fn frames(&self) -> &[(Dataset, Clustering)] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
