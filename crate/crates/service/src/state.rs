//! Loaded summaries, optional raw data and the mutable brushing session.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use gmmscope_core::dataset::{Clustering, Dataset};
use gmmscope_core::interaction::{
    advance_doi, brush_doi, combine_doi, lod_substitute, BandwidthRule, Brush, CombineMode, DoiVector,
    LodOverlay, TransferMatrix,
};
use gmmscope_core::summary::{load_summary, save_summary, Summary};
use gmmscope_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SERIES_MANIFEST: &str = "series.json";

/// On-disk layout of a time series: summary files plus the transfer
/// matrix between each pair of consecutive frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesManifest {
    pub frames: Vec<String>,
    pub transfers: Vec<TransferMatrix>,
}

pub fn save_series(dir: &Path, summaries: &[Summary], transfers: &[TransferMatrix]) -> Result<PathBuf> {
    if transfers.len() + 1 != summaries.len() {
        return Err(Error::invalid("a series needs one transfer matrix between each pair of frames"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for (t, s) in summaries.iter().enumerate() {
        let name = format!("frame_{t:04}.gmm.gz");
        save_summary(s, dir.join(&name))?;
        frames.push(name);
    }
    let manifest = SeriesManifest {
        frames,
        transfers: transfers.to_vec(),
    };
    let path = dir.join(SERIES_MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("series manifest", e))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_series(dir: &Path) -> Result<(Vec<Summary>, Vec<TransferMatrix>)> {
    let path = dir.join(SERIES_MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SeriesManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json("series manifest", e))?;
    let summaries = manifest
        .frames
        .iter()
        .map(|f| load_summary(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    if summaries.is_empty() || manifest.transfers.len() + 1 != summaries.len() {
        return Err(Error::invalid("series manifest frame and transfer counts disagree"));
    }
    for (t, m) in manifest.transfers.iter().enumerate() {
        if m.cols != summaries[t].cluster_count() || m.rows != summaries[t + 1].cluster_count() {
            return Err(Error::invalid(format!("transfer matrix {t} does not match its frames")));
        }
    }
    Ok((summaries, manifest.transfers))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveBrush {
    #[serde(flatten)]
    pub brush: Brush,
    pub mode: CombineMode,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub brushes: Vec<ActiveBrush>,
    pub doi: DoiVector,
    pub timestep: usize,
    pub lod_threshold: Option<f64>,
    pub lod: Option<LodOverlay>,
}

pub struct AppState {
    pub summaries: Vec<Summary>,
    pub transfers: Vec<TransferMatrix>,
    /// Raw samples of the first frame, needed for LOD substitution.
    pub raw: Option<(Dataset, Clustering)>,
    pub session: Mutex<Session>,
}

impl AppState {
    pub fn single(summary: Summary) -> Self {
        Self::series(vec![summary], Vec::new()).expect("one frame needs no transfers")
    }

    pub fn series(summaries: Vec<Summary>, transfers: Vec<TransferMatrix>) -> Result<Self> {
        let first = summaries
            .first()
            .ok_or_else(|| Error::invalid("no summaries to serve"))?;
        if transfers.len() + 1 != summaries.len() {
            return Err(Error::invalid("a series needs one transfer matrix between each pair of frames"));
        }
        let session = Session {
            brushes: Vec::new(),
            doi: DoiVector::ones(first.cluster_count()),
            timestep: 0,
            lod_threshold: None,
            lod: None,
        };
        Ok(AppState {
            summaries,
            transfers,
            raw: None,
            session: Mutex::new(session),
        })
    }

    pub fn with_raw(mut self, dataset: Dataset, clustering: Clustering) -> Result<Self> {
        let s = &self.summaries[0];
        if dataset.n() != s.n_total || clustering.cluster_count() != s.cluster_count() {
            return Err(Error::invalid("raw data does not match the first summary"));
        }
        self.raw = Some((dataset, clustering));
        Ok(self)
    }

    pub fn is_series(&self) -> bool {
        self.summaries.len() > 1
    }

    pub fn lock(&self) -> std::sync::MutexGuard<'_, Session> {
        // a panicked request cannot leave the session half-updated in a way
        // later requests would trip over, so recover the guard
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// DOI from evaluating every brush on one summary, combined left to right.
pub fn evaluate_brushes(summary: &Summary, brushes: &[ActiveBrush]) -> Result<DoiVector> {
    let mut doi: Option<DoiVector> = None;
    for b in brushes {
        let d = brush_doi(summary, &b.brush)?;
        doi = Some(match doi {
            None => d,
            Some(prev) => combine_doi(&[prev, d], b.mode)?,
        });
    }
    Ok(doi.unwrap_or_else(|| DoiVector::ones(summary.cluster_count())))
}

impl Session {
    pub fn add_brush(&mut self, summary: &Summary, brush: ActiveBrush) -> Result<()> {
        let d = brush_doi(summary, &brush.brush)?;
        self.doi = if self.brushes.is_empty() {
            d
        } else {
            combine_doi(&[self.doi.clone(), d], brush.mode)?
        };
        self.brushes.push(brush);
        Ok(())
    }

    pub fn clear_brushes(&mut self, summary: &Summary) {
        self.brushes.clear();
        self.doi = DoiVector::ones(summary.cluster_count());
    }

    /// Moves to frame `t`. Forward moves carry the DOI through the transfer
    /// matrices; backward moves re-evaluate the brushes on frame `t`.
    pub fn move_to(&mut self, state: &AppState, t: usize) -> Result<()> {
        if t >= state.summaries.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 0..{}",
                state.summaries.len()
            )));
        }
        if t >= self.timestep {
            let mut doi = self.doi.clone();
            for m in &state.transfers[self.timestep..t] {
                doi = advance_doi(m, &doi)?;
            }
            self.doi = doi;
        } else {
            self.doi = evaluate_brushes(&state.summaries[t], &self.brushes)?;
        }
        self.timestep = t;
        // raw data exists for the first frame only
        if t != 0 {
            self.lod = None;
        } else if let Some(th) = self.lod_threshold {
            self.refresh_lod(state, th)?;
        }
        Ok(())
    }

    pub fn refresh_lod(&mut self, state: &AppState, threshold: f64) -> Result<()> {
        let (ds, cl) = state
            .raw
            .as_ref()
            .ok_or_else(|| Error::invalid("no raw data loaded"))?;
        self.lod = Some(lod_substitute(
            &state.summaries[0],
            &self.doi,
            threshold,
            ds,
            cl,
            BandwidthRule::Silverman,
        )?);
        Ok(())
    }
}
