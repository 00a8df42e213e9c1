//! Multiband image container, per-band normalization and coordinate grids.
//!
//! Pixel `(i, j)` of an `H x W` band sits at the pixel center
//! `x = 2 (j + 0.5) / W - 1`, `y = 2 (i + 0.5) / H - 1`; grids list pixels
//! row-major, so row `r` of a grid is pixel `(r / W, r % W)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Matrix;

/// Band description without pixel data; what a checkpoint stores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMeta {
    pub name: String,
    pub gsd_m: f64,
    pub height: usize,
    pub width: usize,
    pub norm_min: f64,
    pub norm_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub name: String,
    pub gsd_m: f64,
    /// `height x width`, normalized to `[0, 1]`.
    pub values: Matrix,
    pub norm_min: f64,
    pub norm_max: f64,
}

impl Band {
    /// Normalizes `raw` with the given range, or the observed min/max.
    pub fn from_raw(name: impl Into<String>, gsd_m: f64, raw: &Matrix, range: Option<(f64, f64)>) -> Result<Self> {
        let name = name.into();
        if raw.is_empty() {
            return Err(Error::Band {
                band: name,
                reason: "band has no pixels".into(),
            });
        }
        if !raw.is_finite() {
            return Err(Error::Band {
                band: name,
                reason: "band contains non-finite values".into(),
            });
        }
        let (lo, hi) = match range {
            Some(r) => r,
            None => observed_range(raw),
        };
        if let Some(v) = raw.data().iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::Band {
                band: name,
                reason: format!("value {v} outside declared range [{lo}, {hi}]"),
            });
        }
        let values = normalize(raw, lo, hi).map_err(|e| Error::Band {
            band: name.clone(),
            reason: format!("{e}"),
        })?;
        Ok(Self {
            name,
            gsd_m,
            values,
            norm_min: lo,
            norm_max: hi,
        })
    }

    pub fn height(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }

    pub fn is_constant(&self) -> bool {
        self.norm_max == self.norm_min
    }

    pub fn meta(&self) -> BandMeta {
        BandMeta {
            name: self.name.clone(),
            gsd_m: self.gsd_m,
            height: self.height(),
            width: self.width(),
            norm_min: self.norm_min,
            norm_max: self.norm_max,
        }
    }

    /// Values in original units.
    pub fn raw(&self) -> Matrix {
        denormalize(&self.values, self.norm_min, self.norm_max)
    }
}

fn observed_range(raw: &Matrix) -> (f64, f64) {
    raw.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// `(v - min) / (max - min)`; a constant range maps everything to 0.5.
pub fn normalize(raw: &Matrix, min: f64, max: f64) -> Result<Matrix> {
    if !(max >= min) {
        return Err(Error::Domain(format!("normalization range [{min}, {max}] is inverted")));
    }
    if max == min {
        return Ok(Matrix::filled(raw.rows(), raw.cols(), 0.5));
    }
    let span = max - min;
    Ok(raw.map(|v| (v - min) / span))
}

/// Inverse of [`normalize`]; a constant range maps everything back to `min`.
pub fn denormalize(values: &Matrix, min: f64, max: f64) -> Matrix {
    if max == min {
        return Matrix::filled(values.rows(), values.cols(), min);
    }
    let span = max - min;
    values.map(|v| v * span + min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultibandImage {
    /// Band order defines the channel index fed to the hypernetwork.
    pub bands: Vec<Band>,
}

impl MultibandImage {
    pub fn new(bands: Vec<Band>) -> Result<Self> {
        if bands.is_empty() {
            return Err(Error::Domain("image needs at least one band".into()));
        }
        for (i, b) in bands.iter().enumerate() {
            if bands[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::Band {
                    band: b.name.clone(),
                    reason: "duplicate band name".into(),
                });
            }
        }
        Ok(Self { bands })
    }

    pub fn band(&self, name: &str) -> Result<&Band> {
        self.bands
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::UnknownBand {
                name: name.into(),
                available: self.band_names(),
            })
    }

    pub fn band_names(&self) -> Vec<String> {
        self.bands.iter().map(|b| b.name.clone()).collect()
    }

    pub fn metas(&self) -> Vec<BandMeta> {
        self.bands.iter().map(Band::meta).collect()
    }

    pub fn pixel_count(&self) -> usize {
        self.bands.iter().map(|b| b.values.len()).sum()
    }

    /// Distinct GSDs in band order of first appearance.
    pub fn resolutions(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for b in &self.bands {
            if !out.contains(&b.gsd_m) {
                out.push(b.gsd_m);
            }
        }
        out
    }

    /// Checks that the model can condition on every band.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        check_metas(&self.metas(), config)
    }
}

pub fn check_metas(metas: &[BandMeta], config: &ModelConfig) -> Result<()> {
    if metas.len() > config.n_channels {
        return Err(Error::Config(format!(
            "image has {} bands but the model has {} channels",
            metas.len(),
            config.n_channels
        )));
    }
    for b in metas {
        if !config.resolutions.contains(&b.gsd_m) {
            return Err(Error::Band {
                band: b.name.clone(),
                reason: format!("GSD {} not in model resolutions {:?}", b.gsd_m, config.resolutions),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    /// `(H*W) x 2`, columns `(x, y)`.
    pub coords: Matrix,
    /// `(H*W) x 1`, absent for rendering-only grids.
    pub targets: Option<Matrix>,
}

/// Center of cell `i` along an axis of `n` cells, in `(-1, 1)`.
#[inline]
pub fn pixel_center(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

fn coords(height: usize, width: usize) -> Matrix {
    let mut data = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        let y = pixel_center(i, height);
        for j in 0..width {
            data.push(pixel_center(j, width));
            data.push(y);
        }
    }
    Matrix::new(height * width, 2, data).expect("sized above")
}

pub fn make_grid(band: &Band) -> CoordGrid {
    let (h, w) = (band.height(), band.width());
    CoordGrid {
        height: h,
        width: w,
        coords: coords(h, w),
        targets: Some(band.values.clone().reshape(h * w, 1).expect("same length")),
    }
}

/// `ceil(scale * n)`, treating products within 1e-9 of an integer as exact.
fn scaled_dim(n: usize, scale: f64) -> usize {
    let v = scale * n as f64;
    let r = libm::round(v);
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        libm::ceil(v) as usize
    }
}

/// Render grid of `ceil(scale*H) x ceil(scale*W)` pixel centers.
pub fn make_grid_scaled(meta: &BandMeta, scale: f64) -> Result<CoordGrid> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("scale must be positive, got {scale}")));
    }
    let (h, w) = (scaled_dim(meta.height, scale), scaled_dim(meta.width, scale));
    if h == 0 || w == 0 {
        return Err(Error::Domain(format!("scale {scale} gives an empty grid")));
    }
    Ok(CoordGrid {
        height: h,
        width: w,
        coords: coords(h, w),
        targets: None,
    })
}
