//! CSV reports, loss traces, point clouds and posterior sample archives.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tomocvae_core::engine::LossRecord;
use tomocvae_core::metrics::HpdBand;
use tomocvae_core::toyval::Point;
use tomocvae_core::Image;

use crate::gridio;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub batch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl From<&LossRecord> for LossRow {
    fn from(r: &LossRecord) -> Self {
        LossRow { batch: r.batch, loss: r.loss, reconstruction: r.reconstruction, kl: r.kl }
    }
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let rows: Vec<LossRow> = trace.iter().map(LossRow::from).collect();
    write_csv(path, &rows)
}

/// Loss trace of a model whose objective has no KL split.
pub fn write_plain_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let rows: Vec<LossRow> = trace
        .iter()
        .enumerate()
        .map(|(batch, l)| LossRow { batch, loss: *l, reconstruction: *l, kl: 0.0 })
        .collect();
    write_csv(path, &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub x: f64,
    pub y: f64,
}

pub fn write_points(path: &Path, points: &[Point]) -> Result<()> {
    let rows: Vec<PointRow> = points.iter().map(|p| PointRow { x: p[0], y: p[1] }).collect();
    write_csv(path, &rows)
}

pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    Ok(read_csv::<PointRow>(path)?.into_iter().map(|r| [r.x, r.y]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub column: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Ground truth along the same row, when known.
    pub truth: Option<f64>,
}

pub fn write_band(path: &Path, band: &HpdBand, truth: Option<&[f64]>) -> Result<()> {
    let rows: Vec<BandRow> = (0..band.mean.len())
        .map(|c| BandRow {
            column: c,
            mean: band.mean[c],
            lower: band.lower[c],
            upper: band.upper[c],
            truth: truth.map(|t| t[c]),
        })
        .collect();
    write_csv(path, &rows)
}

pub fn read_band(path: &Path) -> Result<Vec<BandRow>> {
    let rows = read_csv::<BandRow>(path)?;
    ensure!(!rows.is_empty(), "{} holds no band rows", path.display());
    Ok(rows)
}

/// Metadata stored with every posterior sample archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveSummary {
    pub seed: u64,
    pub samples: usize,
    /// Recurrent steps `K`.
    pub iterations: usize,
    /// Observation variance in count units.
    pub beta: f64,
    pub latent_dim: usize,
    pub count_level: f64,
    pub scale: f64,
    pub phantom: usize,
    pub stored_samples: bool,
}

pub const SAMPLES_FILE: &str = "samples.tgrd";
pub const MEAN_FILE: &str = "mean.tgrd";
pub const VARIANCE_FILE: &str = "variance.tgrd";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq)]
pub struct SampleArchive {
    pub summary: ArchiveSummary,
    pub samples: Vec<Image>,
    pub mean: Image,
    pub variance: Image,
}

impl SampleArchive {
    /// Writes the archive into `dir`; returns the files written.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut files = Vec::new();
        if self.summary.stored_samples {
            let p = dir.join(SAMPLES_FILE);
            gridio::write_stack(&p, &self.samples)?;
            files.push(p);
        }
        for (name, img) in [(MEAN_FILE, &self.mean), (VARIANCE_FILE, &self.variance)] {
            let p = dir.join(name);
            gridio::write_grid(&p, img)?;
            files.push(p);
        }
        let p = dir.join(SUMMARY_FILE);
        let mut json = serde_json::to_string_pretty(&self.summary)?;
        json.push('\n');
        fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?;
        files.push(p);
        Ok(files)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let summary: ArchiveSummary = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        let samples = if summary.stored_samples {
            let s = gridio::read_stack(&dir.join(SAMPLES_FILE))?;
            ensure!(s.len() == summary.samples, "archive {} holds {} of {} samples", dir.display(), s.len(), summary.samples);
            s
        } else {
            Vec::new()
        };
        let mean = gridio::read_grid(&dir.join(MEAN_FILE))?;
        let variance = gridio::read_grid(&dir.join(VARIANCE_FILE))?;
        ensure!(mean.shape() == variance.shape(), "archive {} mean and variance differ in shape", dir.display());
        Ok(SampleArchive { summary, samples, mean, variance })
    }
}
