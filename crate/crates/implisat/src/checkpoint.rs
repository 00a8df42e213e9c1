//! Binary checkpoint: the compressed form of one image.
//!
//! Layout, all integers little-endian:
//!
//! | bytes      | content                                                  |
//! |------------|----------------------------------------------------------|
//! | 4          | magic `ISAT`                                             |
//! | 2          | format version (`u16`, currently 1)                      |
//! | 4          | `u32` length `J` of the header                           |
//! | `J`        | UTF-8 JSON `{"config": ModelConfig, "bands": [BandMeta]}`|
//! | 4 x count  | every trainable array as `f32`, row-major, in order      |
//! | 4 x m x m  | `Z` as `f32` (Fourier mode only)                         |
//! | 8          | FNV-1a 64 of all preceding bytes                         |
//!
//! Array order: first layer (weight, bias); hidden layers ascending, each
//! `W_alpha`, `W_beta`, bias (or the dense weight and bias outside Fourier
//! mode); output layer (weight, bias); hypernetwork layers ascending (weight,
//! bias). Shapes follow from the config, so no per-array headers are stored.

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use implisat_core::data::{make_grid_scaled, Band, BandMeta, MultibandImage};
use implisat_core::metrics::{self, EvalReport, FrequencyHistogram, DEFAULT_CHUNK};
use implisat_core::model::{init, predict_chunked, BandCondition, ModelConfig, ModelParams};
use implisat_core::{Matrix, Rng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ISAT";
pub const VERSION: u16 = 1;

const PREFIX: usize = 4 + 2 + 4;
const CHECKSUM: usize = 8;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    bands: Vec<BandMeta>,
}

/// Trained parameters plus the band metadata needed to render them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub bands: Vec<BandMeta>,
}

fn header_json(config: &ModelConfig, bands: &[BandMeta]) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        bands: bands.to_vec(),
    };
    serde_json::to_vec(&header).map_err(|e| Error::Format(format!("cannot serialize header: {e}")))
}

fn float_count(params: &ModelParams) -> usize {
    params.arrays.count() + params.z.as_ref().map_or(0, Matrix::len)
}

/// Exact file size for `config` and `bands`.
pub fn encoded_size(config: &ModelConfig, bands: &[BandMeta]) -> Result<u64> {
    config.validate()?;
    let floats = config.trainable_count() + config.z_len();
    Ok((PREFIX + header_json(config, bands)?.len() + 4 * floats + CHECKSUM) as u64)
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// `params` with every array (and `Z`) rounded through `f32`, i.e. what a
/// save/load round trip returns.
pub fn round_to_f32(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for a in out.arrays.arrays_mut() {
        a.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    if let Some(z) = out.z.as_mut() {
        z.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    out
}

/// Raw payload bytes over checkpoint bytes.
pub fn compression_ratio(image_bytes: u64, checkpoint_bytes: u64) -> f64 {
    image_bytes as f64 / checkpoint_bytes as f64
}

impl Checkpoint {
    pub fn new(params: ModelParams, image: &MultibandImage) -> Result<Self> {
        image.check_config(&params.config)?;
        Ok(Self {
            params,
            bands: image.metas(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = header_json(&self.params.config, &self.bands)?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(PREFIX + header.len() + 4 * float_count(&self.params) + CHECKSUM);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        let arrays = self.params.arrays.arrays();
        for a in arrays.into_iter().chain(self.params.z.as_ref()) {
            for &v in a.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < PREFIX {
            return Err(Error::Truncated {
                expected: PREFIX as u64,
                actual,
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let verify = || {
            let body = bytes.len().checked_sub(CHECKSUM)?;
            let stored = u64::from_le_bytes(bytes[body..].try_into().unwrap());
            let computed = checksum(&bytes[..body]);
            (stored != computed).then_some(Error::Checksum { stored, computed })
        };
        let header_end = PREFIX.saturating_add(header_len);
        if bytes.len() < header_end + CHECKSUM {
            return Err(Error::Truncated {
                expected: (header_end + CHECKSUM) as u64,
                actual,
            });
        }
        // a corrupted header usually fails to parse; report it as corruption
        let header: Header = match serde_json::from_slice(&bytes[PREFIX..header_end]) {
            Ok(h) => h,
            Err(e) => return Err(verify().unwrap_or_else(|| Error::Format(format!("header: {e}")))),
        };
        if let Err(e) = header.config.validate() {
            return Err(verify().unwrap_or(Error::Core(e)));
        }
        let expected = encoded_size(&header.config, &header.bands)?;
        if actual < expected {
            return Err(Error::Truncated { expected, actual });
        }
        if actual > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after the checksum",
                actual - expected
            )));
        }
        if let Some(e) = verify() {
            return Err(e);
        }
        let mut params = init(&header.config, &mut Rng::new(header.config.seed))?;
        let mut floats = bytes[header_end..bytes.len() - CHECKSUM]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut targets = params.arrays.arrays_mut();
        targets.extend(params.z.as_mut());
        for a in targets {
            for v in a.data_mut() {
                *v = floats.next().expect("size checked above");
            }
        }
        Ok(Self {
            params,
            bands: header.bands,
        })
    }

    /// Writes the checkpoint and returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.encode()?;
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Renders band `name` at `scale` in the normalized domain, evaluating
    /// `chunk`-row pieces of the grid in parallel.
    pub fn render_normalized(&self, name: &str, scale: f64, chunk: usize) -> Result<Matrix> {
        let (channel, meta) = self
            .bands
            .iter()
            .enumerate()
            .find(|(_, m)| m.name == name)
            .ok_or_else(|| implisat_core::Error::UnknownBand {
                name: name.into(),
                available: self.bands.iter().map(|m| m.name.clone()).collect(),
            })?;
        let grid = make_grid_scaled(meta, scale)?;
        let cond = BandCondition::new(&self.params.config, meta.gsd_m, channel)?;
        let chunk = chunk.max(1);
        let rows = grid.coords.rows();
        let pieces = (0..rows.div_ceil(chunk))
            .into_par_iter()
            .map(|c| {
                let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(rows)).collect();
                predict_chunked(&self.params, &grid.coords.select_rows(&idx), &cond, chunk)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let data: Vec<f64> = pieces.iter().flat_map(|p| p.data().iter().copied()).collect();
        Ok(Matrix::new(grid.height, grid.width, data)?)
    }

    /// Band `name` at `scale` in original units. A constant band renders
    /// as its constant value.
    pub fn reconstruct(&self, name: &str, scale: f64) -> Result<Band> {
        let mut values = self.render_normalized(name, scale, DEFAULT_CHUNK)?;
        let meta = self.bands.iter().find(|m| m.name == name).expect("found by render");
        if meta.norm_max == meta.norm_min {
            values = Matrix::filled(values.rows(), values.cols(), 0.5);
        }
        Ok(Band {
            name: meta.name.clone(),
            gsd_m: meta.gsd_m,
            values,
            norm_min: meta.norm_min,
            norm_max: meta.norm_max,
        })
    }

    /// Scores the checkpoint against `image` at scale 1.
    pub fn evaluate(&self, image: &MultibandImage) -> Result<EvalReport> {
        let names: Vec<&str> = self.bands.iter().map(|m| m.name.as_str()).collect();
        if names != image.band_names() {
            return Err(implisat_core::Error::Domain(format!(
                "checkpoint bands {names:?} do not match image bands {:?}",
                image.band_names()
            ))
            .into());
        }
        Ok(metrics::evaluate(&self.params, image, DEFAULT_CHUNK)?)
    }

    pub fn frequency_analysis(&self) -> Result<FrequencyHistogram> {
        Ok(metrics::frequency_analysis(&self.params, &self.bands)?)
    }
}
