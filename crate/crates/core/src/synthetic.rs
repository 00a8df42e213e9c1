//! Deterministic multi-resolution test images built from 2-D sinusoids.
//!
//! Each band is `sum_i a_i sin(2 pi (f_i · (x, y)) + p_i) + noise` evaluated
//! at the same pixel centers the training grid uses, then mapped affinely
//! from `[-A, A]` (with `A = sum |a_i| + noise`) onto `[0, 1]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{pixel_center, Band, MultibandImage};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub amplitude: f64,
    /// Cycles per unit coordinate along `(x, y)`.
    pub frequency: [f64; 2],
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticBand {
    pub name: String,
    pub gsd_m: f64,
    pub height: usize,
    pub width: usize,
    pub components: Vec<Component>,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub bands: Vec<SyntheticBand>,
}

fn c(amplitude: f64, fx: f64, fy: f64, phase: f64) -> Component {
    Component {
        amplitude,
        frequency: [fx, fy],
        phase,
    }
}

impl Default for SyntheticSpec {
    /// Three bands whose detail shrinks with GSD: a 64x64 "10 m" band with
    /// frequencies up to 12 cycles, a 32x32 "20 m" band up to 6 and a 16x16
    /// "60 m" band up to 2, all with noise 0.01.
    fn default() -> Self {
        Self {
            seed: 2024,
            bands: vec![
                SyntheticBand {
                    name: "B2".into(),
                    gsd_m: 10.0,
                    height: 64,
                    width: 64,
                    components: vec![
                        c(1.0, 2.0, 1.0, 0.0),
                        c(0.6, 5.0, -4.0, 0.7),
                        c(0.35, 9.0, 6.0, 1.3),
                        c(0.2, 12.0, -2.0, 2.1),
                    ],
                    noise: 0.01,
                },
                SyntheticBand {
                    name: "B5".into(),
                    gsd_m: 20.0,
                    height: 32,
                    width: 32,
                    components: vec![c(1.0, 1.0, 2.0, 0.4), c(0.5, 3.0, -3.0, 1.0), c(0.25, 6.0, 1.0, 2.0)],
                    noise: 0.01,
                },
                SyntheticBand {
                    name: "B1".into(),
                    gsd_m: 60.0,
                    height: 16,
                    width: 16,
                    components: vec![c(1.0, 1.0, 0.0, 0.2), c(0.4, 1.0, -2.0, 1.5)],
                    noise: 0.01,
                },
            ],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(Error::Config("synthetic spec has no bands".into()));
        }
        for b in &self.bands {
            let fail = |reason: String| {
                Err(Error::Band {
                    band: b.name.clone(),
                    reason,
                })
            };
            if b.height == 0 || b.width == 0 {
                return fail("dimensions must be >= 1".into());
            }
            if !(b.gsd_m > 0.0) {
                return fail(format!("gsd must be positive, got {}", b.gsd_m));
            }
            if !(b.noise >= 0.0 && b.noise.is_finite()) {
                return fail(format!("noise must be a finite non-negative amplitude, got {}", b.noise));
            }
            let finite = b
                .components
                .iter()
                .all(|c| c.amplitude.is_finite() && c.phase.is_finite() && c.frequency.iter().all(|f| f.is_finite()));
            if !finite {
                return fail("components must be finite".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    pub image: MultibandImage,
    /// Bands that came out constant (no components and no noise).
    pub warnings: Vec<String>,
}

/// Value of one band at normalized coordinates `(x, y)` before noise and
/// rescaling.
pub fn signal(band: &SyntheticBand, x: f64, y: f64) -> f64 {
    band.components
        .iter()
        .map(|c| c.amplitude * libm::sin(2.0 * PI * (c.frequency[0] * x + c.frequency[1] * y) + c.phase))
        .sum()
}

pub fn generate(spec: &SyntheticSpec) -> Result<Synthesized> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut bands = Vec::with_capacity(spec.bands.len());
    let mut warnings = Vec::new();
    for b in &spec.bands {
        let mut noise_rng = rng.fork();
        let amp: f64 = b.components.iter().map(|c| c.amplitude.abs()).sum::<f64>() + b.noise;
        if amp == 0.0 {
            warnings.push(format!("band `{}` is constant: no components and no noise", b.name));
        }
        let mut data = Vec::with_capacity(b.height * b.width);
        for i in 0..b.height {
            let y = pixel_center(i, b.height);
            for j in 0..b.width {
                let x = pixel_center(j, b.width);
                let noise = if b.noise > 0.0 {
                    b.noise * noise_rng.uniform(-1.0, 1.0)
                } else {
                    0.0
                };
                let v = if amp == 0.0 {
                    0.5
                } else {
                    ((signal(b, x, y) + noise + amp) / (2.0 * amp)).clamp(0.0, 1.0)
                };
                data.push(v);
            }
        }
        let values = Matrix::new(b.height, b.width, data)?;
        bands.push(Band {
            name: b.name.clone(),
            gsd_m: b.gsd_m,
            values,
            norm_min: 0.0,
            norm_max: 1.0,
        });
    }
    Ok(Synthesized {
        image: MultibandImage::new(bands)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(fx: f64) -> SyntheticSpec {
        SyntheticSpec {
            seed: 1,
            bands: vec![SyntheticBand {
                name: "S".into(),
                gsd_m: 10.0,
                height: 4,
                width: 5,
                components: vec![c(1.0, fx, 0.0, 0.0)],
                noise: 0.0,
            }],
        }
    }

    #[test]
    fn closed_form_at_center_column() {
        // width 5: column 2 sits at x = 0, so sin(0) = 0 rescales to 0.5
        let img = generate(&single(1.0)).unwrap().image;
        let v = &img.bands[0].values;
        for i in 0..4 {
            assert!((v.get(i, 2) - 0.5).abs() < 1e-15);
        }
        // column 3 at x = 0.4: (sin(0.8 pi) + 1) / 2
        let expected = (libm::sin(2.0 * PI * 0.4) + 1.0) / 2.0;
        assert!((v.get(0, 3) - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_in_range() {
        let spec = SyntheticSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert!(a.warnings.is_empty());
        for band in &a.image.bands {
            assert!(band.values.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let dims: Vec<_> = a.image.bands.iter().map(|b| (b.height(), b.gsd_m)).collect();
        assert_eq!(dims, vec![(64, 10.0), (32, 20.0), (16, 60.0)]);
    }

    #[test]
    fn empty_band_warns_and_is_constant() {
        let mut spec = single(1.0);
        spec.bands[0].components.clear();
        let out = generate(&spec).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.image.bands[0].values.data().iter().all(|&v| v == 0.5));
    }
}
