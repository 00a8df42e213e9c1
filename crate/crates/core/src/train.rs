//! Per-image optimization: batched coordinate sampling over all bands, mean
//! squared error, bias-corrected Adam over every trainable array, and
//! early stopping on full-grid MSE with best-checkpoint retention.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{make_grid, CoordGrid, MultibandImage};
use crate::error::{shape_err, Error, Result};
use crate::grad::{loss_gradient, Batch, GradientSet};
use crate::metrics::{evaluate, EvalReport, DEFAULT_CHUNK};
use crate::model::{init, BandCondition, ModelConfig, ModelParams, ParamArrays};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_per_band: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    /// Full-grid evaluation interval, in iterations.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_per_band: 1024,
            early_stop_patience: 20,
            early_stop_min_delta: 0.0,
            log_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps >= 0.0) {
            return bad("adam_eps must be >= 0");
        }
        if self.batch_per_band == 0 {
            return bad("batch_per_band must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return bad("early_stop_min_delta must be >= 0");
        }
        Ok(())
    }
}

/// First and second moments for every trainable array, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamArrays,
    pub v: ParamArrays,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.arrays.zeros_like(),
            v: params.arrays.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update on flat slices. `t` is the 1-based step.
pub fn adam_update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - libm::pow(b1, t as f64);
    let bc2 = 1.0 - libm::pow(b2, t as f64);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.adam_eps);
    }
}

/// Applies one Adam step to every trainable array. `Z` is not trainable and
/// is left alone.
pub fn adam_update(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let g = grads.arrays();
    let mut p = params.arrays.arrays_mut();
    let mut m = state.m.arrays_mut();
    let mut v = state.v.arrays_mut();
    if g.len() != p.len() || m.len() != p.len() || v.len() != p.len() {
        return Err(shape_err("adam", (p.len(), 0), (g.len(), 0)));
    }
    for i in 0..p.len() {
        if g[i].shape() != p[i].shape() || m[i].shape() != p[i].shape() || v[i].shape() != p[i].shape() {
            return Err(shape_err("adam", p[i].shape(), g[i].shape()));
        }
        adam_update_slice(p[i].data_mut(), g[i].data(), m[i].data_mut(), v[i].data_mut(), t, cfg);
    }
    Ok(())
}

/// Mean squared error.
pub fn loss(predictions: &Matrix, targets: &Matrix) -> Result<f64> {
    let diff = predictions.sub(targets)?;
    if diff.is_empty() {
        return Ok(0.0);
    }
    Ok(diff.data().iter().map(|r| r * r).sum::<f64>() / diff.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    /// Mean squared error of the most recent training batch.
    pub loss: f64,
    /// Full-grid MSE pooled over all pixels of all bands.
    pub eval_mse: f64,
    pub eval_psnr: f64,
    /// Lowest `eval_mse` seen so far.
    pub best_mse: f64,
    pub band_mse: Vec<f64>,
    pub band_psnr: Vec<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub band_names: Vec<String>,
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// PSNR of the entry at `iteration`, if that iteration was logged.
    pub fn psnr_at(&self, iteration: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.iteration == iteration).map(|e| e.eval_psnr)
    }
}

/// Observer hooks for [`fit`]; the core has no clock of its own.
pub trait FitHooks {
    fn elapsed_secs(&mut self) -> f64 {
        0.0
    }
    fn on_log(&mut self, _entry: &LogEntry) {}
}

impl FitHooks for () {}

/// Holds the per-image state that stays fixed across steps.
pub struct Trainer<'a> {
    image: &'a MultibandImage,
    config: TrainConfig,
    grids: Vec<CoordGrid>,
    conds: Vec<BandCondition>,
    rng: Rng,
    adam: AdamState,
    iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(image: &'a MultibandImage, params: &ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        params.config.validate()?;
        image.check_config(&params.config)?;
        let grids = image.bands.iter().map(make_grid).collect();
        let conds = image
            .bands
            .iter()
            .enumerate()
            .map(|(ch, b)| BandCondition::new(&params.config, b.gsd_m, ch))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            image,
            rng: Rng::new(config.seed),
            config,
            grids,
            conds,
            adam: AdamState::new(params),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Draws this step's batch: `batch_per_band` rows per band, distinct
    /// within the band unless the band has fewer pixels than that.
    pub fn sample_batches(&mut self) -> Vec<Batch> {
        let k = self.config.batch_per_band;
        self.grids
            .iter()
            .zip(&self.conds)
            .map(|(grid, cond)| {
                let idx = self.rng.sample_indices(grid.coords.rows(), k);
                Batch {
                    coords: grid.coords.select_rows(&idx),
                    targets: grid.targets.as_ref().expect("training grid").select_rows(&idx),
                    cond: *cond,
                }
            })
            .collect()
    }

    /// One optimizer step; returns the batch MSE before the update.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<f64> {
        let iteration = self.iteration + 1;
        let batches = self.sample_batches();
        let samples: usize = batches.iter().map(|b| b.coords.rows()).sum();
        let (sum, mut grads) = loss_gradient(params, &batches).map_err(|e| match e {
            Error::Numeric(_) => Error::Divergence { iteration },
            other => other,
        })?;
        let mse = sum / samples as f64;
        if !mse.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        grads.scale(1.0 / samples as f64);
        adam_update(params, &grads, &mut self.adam, &self.config)?;
        self.iteration = iteration;
        Ok(mse)
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<EvalReport> {
        evaluate(params, self.image, DEFAULT_CHUNK)
    }
}

/// Standalone single step, for callers that keep their own state.
pub fn step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    image: &MultibandImage,
    rng: &mut Rng,
    config: &TrainConfig,
) -> Result<f64> {
    let mut trainer = Trainer::new(image, params, config.clone())?;
    trainer.rng = rng.clone();
    trainer.adam = core::mem::replace(adam, AdamState::new(params));
    trainer.iteration = trainer.adam.t as usize;
    let result = trainer.step(params);
    *adam = trainer.adam;
    *rng = trainer.rng;
    result
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters with the lowest full-grid MSE among all evaluations.
    pub params: ModelParams,
    pub log: TrainLog,
    pub best_iteration: usize,
    pub stopped_early: bool,
}

/// Training failure that still hands back the best evaluated parameters.
#[derive(Debug, Clone)]
pub struct FitFailure {
    pub error: Error,
    pub best: Option<ModelParams>,
    pub log: TrainLog,
}

/// Initializes a model from `model_config.seed` and trains it.
pub fn fit(
    image: &MultibandImage,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    hooks: &mut dyn FitHooks,
) -> core::result::Result<FitOutcome, FitFailure> {
    let fail = |error| FitFailure {
        error,
        best: None,
        log: TrainLog::default(),
    };
    let params = init(model_config, &mut Rng::new(model_config.seed)).map_err(fail)?;
    fit_from(params, image, train_config, hooks)
}

/// Trains starting from `params`. Evaluates the full grid every
/// `log_every` iterations and after the last one.
pub fn fit_from(
    mut params: ModelParams,
    image: &MultibandImage,
    train_config: &TrainConfig,
    hooks: &mut dyn FitHooks,
) -> core::result::Result<FitOutcome, FitFailure> {
    let mut log = TrainLog {
        band_names: image.band_names(),
        entries: Vec::new(),
    };
    let mut trainer = match Trainer::new(image, &params, train_config.clone()) {
        Ok(t) => t,
        Err(error) => return Err(FitFailure { error, best: None, log }),
    };
    let cfg = train_config;
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;

    while trainer.iteration() < cfg.iterations {
        let batch_loss = match trainer.step(&mut params) {
            Ok(l) => l,
            Err(error) => {
                return Err(FitFailure {
                    error,
                    best: best.map(|b| b.2),
                    log,
                })
            }
        };
        let it = trainer.iteration();
        if it % cfg.log_every != 0 && it != cfg.iterations {
            continue;
        }
        let report = match trainer.evaluate(&params) {
            Ok(r) if r.aggregate_mse.is_finite() => r,
            Ok(_) | Err(Error::Numeric(_)) => {
                return Err(FitFailure {
                    error: Error::Divergence { iteration: it },
                    best: best.map(|b| b.2),
                    log,
                })
            }
            Err(error) => {
                return Err(FitFailure {
                    error,
                    best: best.map(|b| b.2),
                    log,
                })
            }
        };
        let mse = report.aggregate_mse;
        if best.as_ref().map_or(true, |b| mse < b.0) {
            best = Some((mse, it, params.clone()));
        }
        if mse < reference - cfg.early_stop_min_delta {
            reference = mse;
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = LogEntry {
            iteration: it,
            loss: batch_loss,
            eval_mse: mse,
            eval_psnr: report.aggregate_psnr,
            best_mse: best.as_ref().map_or(mse, |b| b.0),
            band_mse: report.bands.iter().map(|b| b.mse).collect(),
            band_psnr: report.bands.iter().map(|b| b.psnr).collect(),
            wall_secs: hooks.elapsed_secs(),
        };
        hooks.on_log(&entry);
        log.entries.push(entry);
        if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    let (_, best_iteration, params) = best.expect("the final iteration is always evaluated");
    Ok(FitOutcome {
        params,
        log,
        best_iteration,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Band;
    use crate::model::ModulationMode;
    use alloc::vec;

    fn small_model(mode: ModulationMode) -> ModelConfig {
        ModelConfig {
            layers: 4,
            hidden_width: 16,
            rank: 4,
            hyper_layers: 2,
            hyper_width: 8,
            mode,
            omega0: 30.0,
            n_channels: 2,
            resolutions: vec![10.0, 20.0],
            seed: 1,
            strict_low_rank: true,
        }
    }

    fn image() -> MultibandImage {
        let a = Matrix::uniform(&mut Rng::new(1), 6, 6, 0.0, 1.0).unwrap();
        let b = Matrix::uniform(&mut Rng::new(2), 3, 3, 0.0, 1.0).unwrap();
        MultibandImage::new(vec![
            Band::from_raw("B2", 10.0, &a, Some((0.0, 1.0))).unwrap(),
            Band::from_raw("B5", 20.0, &b, Some((0.0, 1.0))).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn loss_cases() {
        let a = Matrix::from_rows(&[&[0.0], &[0.0]]);
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        assert_eq!(loss(&a, &b).unwrap(), 1.0);
        assert!(loss(&a, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, -2.0, 3.5];
        let orig = p.clone();
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update_slice(&mut p, &[0.0; 3], &mut m, &mut v, 1, &cfg);
        for (a, b) in p.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let img = image();
        let run = || {
            let mc = small_model(ModulationMode::Fourier);
            let mut params = init(&mc, &mut Rng::new(mc.seed)).unwrap();
            let mut t = Trainer::new(&img, &params, TrainConfig { batch_per_band: 16, ..Default::default() }).unwrap();
            for _ in 0..10 {
                t.step(&mut params).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batches_are_distinct_unless_band_is_small() {
        let img = image();
        let mc = small_model(ModulationMode::Shift);
        let params = init(&mc, &mut Rng::new(0)).unwrap();
        let mut t = Trainer::new(&img, &params, TrainConfig { batch_per_band: 20, ..Default::default() }).unwrap();
        let b = t.sample_batches();
        assert_eq!(b[0].coords.rows(), 20);
        let mut rows: Vec<_> = (0..20).map(|r| (b[0].coords.get(r, 0).to_bits(), b[0].coords.get(r, 1).to_bits())).collect();
        rows.sort_unstable();
        rows.dedup();
        assert_eq!(rows.len(), 20);
        // 3x3 band: sampled with replacement
        assert_eq!(b[1].coords.rows(), 20);
    }

    #[test]
    fn fit_keeps_best_and_logs_increasing_iterations() {
        let img = image();
        let mc = small_model(ModulationMode::Fourier);
        let tc = TrainConfig {
            iterations: 60,
            lr: 1e-3,
            batch_per_band: 16,
            log_every: 7,
            ..Default::default()
        };
        let out = fit(&img, &mc, &tc, &mut ()).unwrap();
        let its: Vec<_> = out.log.entries.iter().map(|e| e.iteration).collect();
        assert!(its.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*its.last().unwrap(), 60);
        let min = out.log.entries.iter().map(|e| e.eval_mse).fold(f64::MAX, f64::min);
        let final_mse = evaluate(&out.params, &img, DEFAULT_CHUNK).unwrap().aggregate_mse;
        assert_eq!(final_mse, min);
        assert!(out.log.entries.windows(2).all(|w| w[1].best_mse <= w[0].best_mse));
    }

    #[test]
    fn early_stopping_triggers() {
        let img = image();
        let mc = small_model(ModulationMode::Scale);
        let tc = TrainConfig {
            iterations: 1000,
            lr: 1e-12,
            batch_per_band: 4,
            log_every: 1,
            early_stop_patience: 3,
            early_stop_min_delta: 1.0,
            ..Default::default()
        };
        let out = fit(&img, &mc, &tc, &mut ()).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.entries.len(), 4);
    }

    #[test]
    fn divergence_reports_iteration() {
        let img = image();
        let mc = small_model(ModulationMode::None);
        let tc = TrainConfig {
            iterations: 50,
            lr: 1e300,
            batch_per_band: 4,
            log_every: 1,
            ..Default::default()
        };
        let err = fit(&img, &mc, &tc, &mut ()).unwrap_err();
        assert!(matches!(err.error, Error::Divergence { .. }), "{:?}", err.error);
    }
}
