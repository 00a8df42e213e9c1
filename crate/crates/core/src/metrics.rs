//! PSNR/MSE evaluation, method comparison, and the distribution of the
//! frequency components `Omega ⊙ Z` produced by the hypernetwork.
//!
//! All metrics are computed in the normalized `[0, 1]` pixel domain with
//! peak 1, so `psnr = -10 log10(mse)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{BandMeta, MultibandImage};
use crate::error::{Error, Result};
use crate::model::{hyper_mlp, BandCondition, ModelParams, ModulationMode};
use crate::render::reconstruct_normalized;
use crate::tensor::Matrix;

/// Rows evaluated per forward call when rendering full grids.
pub const DEFAULT_CHUNK: usize = 65_536;

/// Number of histogram bins in [`frequency_analysis`].
pub const HISTOGRAM_BINS: usize = 64;

/// Peak signal-to-noise ratio for unit peak. `mse == 0` gives `+inf`.
pub fn psnr(mse: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::Domain(format!("mse must be non-negative, got {mse}")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * libm::log10(mse))
}

pub fn mse(prediction: &Matrix, target: &Matrix) -> Result<f64> {
    crate::train::loss(prediction, target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub name: String,
    pub mse: f64,
    pub psnr: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Free-form label for comparison tables; defaults to the mode name.
    pub method: String,
    pub mode: ModulationMode,
    pub model_seed: u64,
    pub bands: Vec<BandMetrics>,
    /// MSE pooled over every pixel of every band.
    pub aggregate_mse: f64,
    pub aggregate_psnr: f64,
}

/// Reconstructs every band at scale 1 and scores it against `image`.
pub fn evaluate(params: &ModelParams, image: &MultibandImage, chunk: usize) -> Result<EvalReport> {
    let metas = image.metas();
    let mut bands = Vec::with_capacity(image.bands.len());
    let mut sq_sum = 0.0;
    let mut pixels = 0;
    for band in &image.bands {
        let pred = reconstruct_normalized(params, &metas, &band.name, 1.0, chunk)?;
        let band_sq: f64 = pred
            .sub(&band.values)?
            .data()
            .iter()
            .map(|r| r * r)
            .sum();
        let n = band.values.len();
        let band_mse = band_sq / n as f64;
        sq_sum += band_sq;
        pixels += n;
        bands.push(BandMetrics {
            name: band.name.clone(),
            mse: band_mse,
            psnr: psnr(band_mse)?,
            pixels: n,
        });
    }
    let aggregate_mse = sq_sum / pixels as f64;
    if !aggregate_mse.is_finite() {
        return Err(Error::Numeric("evaluation produced a non-finite MSE".into()));
    }
    Ok(EvalReport {
        method: params.config.mode.name().into(),
        mode: params.config.mode,
        model_seed: params.config.seed,
        bands,
        aggregate_mse,
        aggregate_psnr: psnr(aggregate_mse)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHistogram {
    pub gsd_m: f64,
    /// `HISTOGRAM_BINS + 1` ascending edges.
    pub bin_edges: Vec<f64>,
    /// Per-bin density; `sum(density * width) == 1`.
    pub densities: Vec<f64>,
    pub samples: usize,
    pub mean: f64,
    pub std_dev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyHistogram {
    /// One group per distinct GSD, in ascending GSD order.
    pub groups: Vec<GroupHistogram>,
}

impl FrequencyHistogram {
    pub fn group(&self, gsd_m: f64) -> Option<&GroupHistogram> {
        self.groups.iter().find(|g| g.gsd_m == gsd_m)
    }
}

/// Pools the entries of `Omega ⊙ Z` over every hidden layer and every
/// channel of each GSD group and histograms them.
pub fn frequency_analysis(params: &ModelParams, metas: &[BandMeta]) -> Result<FrequencyHistogram> {
    let cfg = &params.config;
    if cfg.mode != ModulationMode::Fourier {
        return Err(Error::Mode {
            op: "frequency_analysis",
            mode: cfg.mode.name(),
        });
    }
    let z = params
        .z
        .as_ref()
        .ok_or_else(|| Error::Config("fourier model without Z".into()))?;
    let m = cfg.rank;
    let mut gsds: Vec<f64> = Vec::new();
    for meta in metas {
        if !gsds.contains(&meta.gsd_m) {
            gsds.push(meta.gsd_m);
        }
    }
    gsds.sort_by(|a, b| a.partial_cmp(b).expect("finite GSD"));

    let mut groups = Vec::with_capacity(gsds.len());
    for gsd in gsds {
        let mut pooled = Vec::new();
        for (channel, _) in metas.iter().enumerate().filter(|(_, meta)| meta.gsd_m == gsd) {
            let cond = BandCondition::new(cfg, gsd, channel)?;
            let head = hyper_mlp(&params.arrays.hyper, &cond.encode_all(cfg)?)?.head;
            for l in 0..head.rows() {
                let omega = Matrix::new(m, m, head.row(l)[..m * m].to_vec())?;
                pooled.extend_from_slice(omega.hadamard(z)?.data());
            }
        }
        groups.push(histogram(gsd, &pooled));
    }
    Ok(FrequencyHistogram { groups })
}

fn histogram(gsd_m: f64, values: &[f64]) -> GroupHistogram {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        lo = 0.0;
        hi = 0.0;
    }
    if hi == lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let bin_edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &v in values {
        let idx = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[idx] += 1;
    }
    let densities = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    GroupHistogram {
        gsd_m,
        bin_edges,
        densities,
        samples: values.len(),
        mean,
        std_dev: libm::sqrt(var),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    /// Band name, or `"all"` for the pooled aggregate.
    pub band: String,
    pub psnr_db: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Methods ordered by aggregate PSNR, best first.
    pub ranking: Vec<String>,
}

impl ComparisonTable {
    /// Aggregate PSNR of `a` minus that of `b`.
    pub fn psnr_gap(&self, a: &str, b: &str) -> Option<f64> {
        let get = |m: &str| {
            self.rows
                .iter()
                .find(|r| r.method == m && r.band == "all")
                .map(|r| r.psnr_db)
        };
        Some(get(a)? - get(b)?)
    }
}

/// Table-1-style comparison of reports evaluated on the same image.
pub fn compare(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Domain("compare needs at least one report".into()))?;
    let signature = |r: &EvalReport| -> Vec<(String, usize)> {
        r.bands.iter().map(|b| (b.name.clone(), b.pixels)).collect()
    };
    for r in &reports[1..] {
        if signature(r) != signature(first) {
            return Err(Error::Domain(format!(
                "reports `{}` and `{}` were evaluated on different images",
                first.method, r.method
            )));
        }
    }
    let mut rows = Vec::new();
    for r in reports {
        rows.push(ComparisonRow {
            method: r.method.clone(),
            band: "all".into(),
            psnr_db: r.aggregate_psnr,
            mse: r.aggregate_mse,
        });
        for b in &r.bands {
            rows.push(ComparisonRow {
                method: r.method.clone(),
                band: b.name.clone(),
                psnr_db: b.psnr,
                mse: b.mse,
            });
        }
    }
    let mut order: Vec<&EvalReport> = reports.iter().collect();
    // stable: ties keep input order
    order.sort_by(|a, b| b.aggregate_psnr.partial_cmp(&a.aggregate_psnr).unwrap_or(core::cmp::Ordering::Equal));
    Ok(ComparisonTable {
        rows,
        ranking: order.iter().map(|r| r.method.clone()).collect(),
    })
}
