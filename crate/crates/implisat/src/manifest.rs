//! Band rasters on disk: a JSON manifest listing the bands, plus one raw
//! little-endian, row-major payload per band with no header.
//!
//! ```json
//! {"bands": [{"name": "B2", "gsd_m": 10, "height": 64, "width": 64,
//!             "dtype": "f32", "path": "B2.f32", "norm_min": 0, "norm_max": 1}]}
//! ```
//!
//! `path` is resolved against the manifest's directory. `norm_min` and
//! `norm_max` are optional and must appear together; without them a band is
//! normalized by its observed range.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use implisat_core::data::{Band, MultibandImage};
use implisat_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U16,
    F32,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::U16 => "u16",
            Dtype::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "u16" => Some(Dtype::U16),
            "f32" => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub gsd_m: f64,
    pub height: usize,
    pub width: usize,
    /// Kept as text so an unknown dtype is reported against its band.
    pub dtype: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm_max: Option<f64>,
}

impl ManifestEntry {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Manifest {
            band: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn dtype(&self) -> Result<Dtype> {
        Dtype::parse(&self.dtype).ok_or_else(|| self.fail(format!("unknown dtype `{}` (expected u16 or f32)", self.dtype)))
    }

    pub fn norm_range(&self) -> Result<Option<(f64, f64)>> {
        match (self.norm_min, self.norm_max) {
            (None, None) => Ok(None),
            (Some(lo), Some(hi)) if lo <= hi => Ok(Some((lo, hi))),
            (Some(lo), Some(hi)) => Err(self.fail(format!("norm_min {lo} exceeds norm_max {hi}"))),
            _ => Err(self.fail("norm_min and norm_max must be given together")),
        }
    }

    pub fn payload_bytes(&self) -> Result<u64> {
        Ok((self.height * self.width * self.dtype()?.size()) as u64)
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(self.fail(format!("dimensions {}x{} must be >= 1", self.height, self.width)));
        }
        if !(self.gsd_m.is_finite() && self.gsd_m > 0.0) {
            return Err(self.fail(format!("gsd_m must be positive, got {}", self.gsd_m)));
        }
        self.dtype()?;
        self.norm_range()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub bands: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::Core(implisat_core::Error::Config("manifest lists no bands".into())));
        }
        let mut seen = HashSet::new();
        for entry in &self.bands {
            entry.validate()?;
            if !seen.insert(entry.name.as_str()) {
                return Err(entry.fail("duplicate band name"));
            }
        }
        Ok(())
    }
}

/// One band in original units, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBand {
    pub entry: ManifestEntry,
    /// `height x width` payload values.
    pub values: Matrix,
}

/// A manifest together with its decoded payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub bands: Vec<RawBand>,
}

impl Raster {
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let bands = manifest
            .bands
            .into_iter()
            .map(|entry| {
                let path = base.join(&entry.path);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let values = decode_payload(&entry, &path, &bytes)?;
                Ok(RawBand { entry, values })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bands })
    }

    /// Writes every payload and then the manifest at `manifest_path`.
    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let manifest = Manifest {
            bands: self.bands.iter().map(|b| b.entry.clone()).collect(),
        };
        manifest.validate()?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
        for band in &self.bands {
            let path = base.join(&band.entry.path);
            let bytes = encode_payload(&band.entry, &band.values)?;
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))
    }

    /// Normalizes every band with its declared or observed range.
    pub fn to_image(&self) -> Result<MultibandImage> {
        let bands = self
            .bands
            .iter()
            .map(|b| {
                Band::from_raw(b.entry.name.clone(), b.entry.gsd_m, &b.values, b.entry.norm_range()?).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MultibandImage::new(bands)?)
    }

    /// Original-unit payloads for `image`, each declaring its normalization
    /// range. Payload files are named `<band>.<dtype>`.
    ///
    /// The declared range is rounded to the storage type along with the
    /// values; rounding is monotone, so every stored value stays inside it.
    pub fn from_image(image: &MultibandImage, dtype: Dtype) -> Result<Self> {
        let bands = image
            .bands
            .iter()
            .map(|band| {
                let round = |v: f64| match dtype {
                    Dtype::F32 => v as f32 as f64,
                    Dtype::U16 => v.round(),
                };
                let entry = ManifestEntry {
                    name: band.name.clone(),
                    gsd_m: band.gsd_m,
                    height: band.height(),
                    width: band.width(),
                    dtype: dtype.name().into(),
                    path: format!("{}.{}", band.name, dtype.name()).into(),
                    norm_min: Some(round(band.norm_min)),
                    norm_max: Some(round(band.norm_max)),
                };
                let values = band.raw().map(round);
                Ok(RawBand { entry, values })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { bands })
    }

    /// Total payload size in bytes.
    pub fn payload_bytes(&self) -> Result<u64> {
        self.bands.iter().map(|b| b.entry.payload_bytes()).sum()
    }
}

/// Reads a manifest and its payloads and normalizes every band.
pub fn load_manifest(path: &Path) -> Result<MultibandImage> {
    Raster::read(path)?.to_image()
}

/// Writes `image` in original units as `dtype` payloads next to
/// `manifest_path`.
pub fn write_manifest(image: &MultibandImage, manifest_path: &Path, dtype: Dtype) -> Result<()> {
    Raster::from_image(image, dtype)?.write(manifest_path)
}

fn decode_payload(entry: &ManifestEntry, path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let dtype = entry.dtype()?;
    let expected = entry.payload_bytes()?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::TruncatedPayload {
            band: entry.name.clone(),
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(entry.fail(format!(
            "payload {} has {} bytes, expected {expected}",
            path.display(),
            actual
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    Ok(Matrix::new(entry.height, entry.width, data)?)
}

fn encode_payload(entry: &ManifestEntry, values: &Matrix) -> Result<Vec<u8>> {
    if values.shape() != (entry.height, entry.width) {
        return Err(entry.fail(format!(
            "payload is {}x{}, manifest says {}x{}",
            values.rows(),
            values.cols(),
            entry.height,
            entry.width
        )));
    }
    let dtype = entry.dtype()?;
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    for &v in values.data() {
        match dtype {
            Dtype::U16 => {
                if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
                    return Err(entry.fail(format!("value {v} is not representable as u16")));
                }
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(out)
}
