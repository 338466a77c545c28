//! File formats: NPY arrays, JSON documents, calibration-pair directories
//! and calibration reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::array::{BiasCorrection, Image, Sinogram};
use crate::calibration::{CalibReport, CalibStatus, CalibrationSet};
use crate::error::{Error, Result};
use crate::fbp::FbpConfig;
use crate::geometry::{CalibParams, FanbeamGeometry, GeometryDims};
use crate::npy;

pub const PAIRS_MANIFEST: &str = "pairs.json";

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Image::new(npy::load(path)?)
}

pub fn save_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    npy::save(path, image.data())
}

pub fn load_sinogram(path: impl AsRef<Path>) -> Result<Sinogram> {
    Sinogram::new(npy::load(path)?)
}

pub fn save_sinogram(path: impl AsRef<Path>, sino: &Sinogram) -> Result<()> {
    npy::save(path, sino.data())
}

pub fn load_geometry(path: impl AsRef<Path>) -> Result<FanbeamGeometry> {
    let geom: FanbeamGeometry = read_json(path)?;
    geom.validate()?;
    Ok(geom)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub image: String,
    pub sinogram: String,
}

/// Lists the pair files of a directory, relative to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairsManifest {
    pub pairs: Vec<PairEntry>,
}

pub fn pair_file_names(index: usize) -> PairEntry {
    PairEntry {
        image: format!("pair_{index:04}_image.npy"),
        sinogram: format!("pair_{index:04}_sino.npy"),
    }
}

/// Writes `pair_%04d_image.npy` / `pair_%04d_sino.npy` plus `pairs.json`.
/// Returns every file written.
pub fn write_pairs(dir: impl AsRef<Path>, pairs: &[(Sinogram, Image)]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for (i, (y, x)) in pairs.iter().enumerate() {
        let names = pair_file_names(i);
        save_image(dir.join(&names.image), x)?;
        save_sinogram(dir.join(&names.sinogram), y)?;
        written.push(dir.join(&names.image));
        written.push(dir.join(&names.sinogram));
        entries.push(names);
    }
    let manifest = dir.join(PAIRS_MANIFEST);
    write_json(&manifest, &PairsManifest { pairs: entries })?;
    written.push(manifest);
    Ok(written)
}

/// Reads the pairs listed in `pairs.json`, or every `pair_NNNN_*` file
/// when there is no manifest.
pub fn read_pairs(dir: impl AsRef<Path>) -> Result<CalibrationSet> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(PAIRS_MANIFEST);
    let entries = if manifest_path.exists() {
        read_json::<PairsManifest>(&manifest_path)?.pairs
    } else {
        let mut found = Vec::new();
        for i in 0.. {
            let names = pair_file_names(i);
            if !dir.join(&names.image).exists() {
                break;
            }
            found.push(names);
        }
        found
    };
    let pairs = entries
        .iter()
        .map(|e| {
            Ok((
                load_sinogram(dir.join(&e.sinogram))?,
                load_image(dir.join(&e.image))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    CalibrationSet::new(pairs)
}

/// JSON form of a calibration report. The bias array lives in a separate
/// NPY file, the loss history optionally in CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub params: CalibParams,
    pub s_fbp: f64,
    pub fbp: FbpConfig,
    pub dims: GeometryDims,
    pub geometry: FanbeamGeometry,
    pub converged: bool,
    pub status: CalibStatus,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Path of the bias NPY file, relative to the report.
    pub bias: Option<String>,
}

impl ReportDocument {
    pub fn from_report(report: &CalibReport, bias_file: Option<String>) -> Result<Self> {
        Ok(Self {
            params: report.params.clone(),
            s_fbp: report.s_fbp,
            fbp: report.fbp,
            dims: report.dims,
            geometry: report.geometry()?,
            converged: report.converged,
            status: report.status,
            iterations: report.loss_history.last().map_or(0, |&(i, _)| i),
            initial_loss: report.loss_history.first().map_or(f64::NAN, |&(_, l)| l),
            final_loss: report.final_loss(),
            bias: bias_file,
        })
    }

    /// Loads the bias referenced by a report stored at `report_path`.
    pub fn load_bias(&self, report_path: &Path) -> Result<Option<BiasCorrection>> {
        let Some(name) = &self.bias else {
            return Ok(None);
        };
        let base = report_path.parent().unwrap_or(Path::new("."));
        let sino = load_sinogram(base.join(name))?;
        if sino.dim() != self.dims.sinogram_dim() {
            let (a, d) = self.dims.sinogram_dim();
            let (sa, sd) = sino.dim();
            return Err(Error::shape("bias file", &[a, d], &[sa, sd]));
        }
        Ok(Some(BiasCorrection::new(sino)))
    }
}

pub fn write_loss_history<W: Write>(mut w: W, history: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "iteration,loss")?;
    for (it, loss) in history {
        writeln!(w, "{it},{loss:e}")?;
    }
    Ok(())
}
