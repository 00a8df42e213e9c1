//! Decoding a trained model back into bands, at native or arbitrary scale.

use crate::data::{make_grid_scaled, Band, BandMeta};
use crate::error::{Error, Result};
use crate::model::{predict_chunked, BandCondition, ModelParams};
use crate::tensor::Matrix;

fn lookup<'m>(metas: &'m [BandMeta], name: &str) -> Result<(usize, &'m BandMeta)> {
    metas
        .iter()
        .enumerate()
        .find(|(_, m)| m.name == name)
        .ok_or_else(|| Error::UnknownBand {
            name: name.into(),
            available: metas.iter().map(|m| m.name.clone()).collect(),
        })
}

/// Predicted band in the normalized `[0, 1]` domain, `ceil(scale*H) x
/// ceil(scale*W)`. The channel index is the band's position in `metas`.
pub fn reconstruct_normalized(
    params: &ModelParams,
    metas: &[BandMeta],
    name: &str,
    scale: f64,
    chunk: usize,
) -> Result<Matrix> {
    let (channel, meta) = lookup(metas, name)?;
    let grid = make_grid_scaled(meta, scale)?;
    let cond = BandCondition::new(&params.config, meta.gsd_m, channel)?;
    predict_chunked(params, &grid.coords, &cond, chunk)?.reshape(grid.height, grid.width)
}

/// Like [`reconstruct_normalized`] but returned in original units, as a band
/// carrying the original normalization range.
pub fn reconstruct(params: &ModelParams, metas: &[BandMeta], name: &str, scale: f64, chunk: usize) -> Result<Band> {
    let (_, meta) = lookup(metas, name)?;
    let mut values = reconstruct_normalized(params, metas, name, scale, chunk)?;
    if meta.norm_max == meta.norm_min {
        values = Matrix::filled(values.rows(), values.cols(), 0.5);
    }
    // the model's output is kept as-is even where it strays outside [0, 1]
    Ok(Band {
        name: meta.name.clone(),
        gsd_m: meta.gsd_m,
        values,
        norm_min: meta.norm_min,
        norm_max: meta.norm_max,
    })
}
