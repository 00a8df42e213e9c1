//! The coordinate network and its hypernetwork.
//!
//! Layer 1 maps `(x, y)` to `n` features through `sin(omega0 * (W x + b))`.
//! Layers `2..L-1` are the hidden layers; in Fourier mode each hidden weight
//! is the product `W_alpha · f_mod · W_beta` with `f_mod = cos(Omega ⊙ Z + phi)`
//! produced per band by the hypernetwork. Shift and scale modes keep dense
//! hidden weights and receive an `n`-vector per layer instead. Layer `L` is
//! linear.
//!
//! Activations are stored row-wise (`k x n` for a batch of `k` coordinates)
//! and dense weights as `out x in`, so a layer is `h · Wᵀ + b`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grad::{BackboneTrace, ForwardTrace, HiddenTrace, HyperTrace};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationMode {
    Fourier,
    Shift,
    Scale,
    None,
}

impl ModulationMode {
    pub fn name(self) -> &'static str {
        match self {
            ModulationMode::Fourier => "fourier",
            ModulationMode::Shift => "shift",
            ModulationMode::Scale => "scale",
            ModulationMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fourier" => Some(Self::Fourier),
            "shift" => Some(Self::Shift),
            "scale" => Some(Self::Scale),
            "none" => Some(Self::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Total layer count `L`, including the coordinate and output layers.
    pub layers: usize,
    /// Hidden width `n`.
    pub hidden_width: usize,
    /// Modulation rank `m`.
    pub rank: usize,
    pub hyper_layers: usize,
    pub hyper_width: usize,
    pub mode: ModulationMode,
    pub omega0: f64,
    pub n_channels: usize,
    /// Ground sample distances (meters) the model is conditioned on.
    pub resolutions: Vec<f64>,
    pub seed: u64,
    /// Require `m <= n / 4` in Fourier mode.
    #[serde(default = "default_true")]
    pub strict_low_rank: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden_width: 256,
            rank: 32,
            hyper_layers: 3,
            hyper_width: 64,
            mode: ModulationMode::Fourier,
            omega0: 30.0,
            n_channels: 13,
            resolutions: vec![10.0, 20.0, 60.0],
            seed: 0,
            strict_low_rank: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.layers < 3 {
            return fail(format!("layers must be >= 3, got {}", self.layers));
        }
        if self.hidden_width == 0 {
            return fail("hidden_width must be >= 1".into());
        }
        if self.rank == 0 || self.rank > self.hidden_width {
            return fail(format!(
                "rank must satisfy 1 <= m <= n, got m={} n={}",
                self.rank, self.hidden_width
            ));
        }
        if self.mode == ModulationMode::Fourier
            && self.strict_low_rank
            && self.rank * 4 > self.hidden_width
        {
            return fail(format!(
                "fourier mode requires m <= n/4, got m={} n={}",
                self.rank, self.hidden_width
            ));
        }
        if self.n_channels == 0 {
            return fail("n_channels must be >= 1".into());
        }
        if self.uses_hypernet() && (self.hyper_layers == 0 || self.hyper_width == 0) {
            return fail("hypernetwork needs at least one layer of nonzero width".into());
        }
        if !(self.omega0.is_finite() && self.omega0 > 0.0) {
            return fail(format!("omega0 must be positive, got {}", self.omega0));
        }
        if self.resolutions.is_empty()
            || self.resolutions.iter().any(|r| !(r.is_finite() && *r > 0.0))
        {
            return fail("resolutions must be a non-empty list of positive GSDs".into());
        }
        Ok(())
    }

    pub fn hidden_count(&self) -> usize {
        self.layers - 2
    }

    pub fn uses_hypernet(&self) -> bool {
        self.mode != ModulationMode::None
    }

    /// `1 + n_channels + (L - 2)`: normalized GSD, channel one-hot, layer one-hot.
    pub fn condition_width(&self) -> usize {
        1 + self.n_channels + self.hidden_count()
    }

    pub fn head_width(&self) -> usize {
        match self.mode {
            ModulationMode::Fourier => 2 * self.rank * self.rank,
            ModulationMode::Shift | ModulationMode::Scale => self.hidden_width,
            ModulationMode::None => 0,
        }
    }

    /// `(in, out)` for every hypernetwork layer.
    pub fn hyper_shapes(&self) -> Vec<(usize, usize)> {
        if !self.uses_hypernet() {
            return Vec::new();
        }
        let mut shapes = Vec::with_capacity(self.hyper_layers);
        let mut fan_in = self.condition_width();
        for _ in 1..self.hyper_layers {
            shapes.push((fan_in, self.hyper_width));
            fan_in = self.hyper_width;
        }
        shapes.push((fan_in, self.head_width()));
        shapes
    }

    /// Closed-form number of trainable scalars (`Z` excluded).
    pub fn trainable_count(&self) -> usize {
        let n = self.hidden_width;
        let m = self.rank;
        let first = 3 * n;
        let hidden = match self.mode {
            ModulationMode::Fourier => 2 * n * m + n,
            _ => n * n + n,
        } * self.hidden_count();
        let output = n + 1;
        let hyper: usize = self.hyper_shapes().iter().map(|(i, o)| i * o + o).sum();
        first + hidden + output + hyper
    }

    /// Entries of the frozen `Z` matrix (Fourier mode only).
    pub fn z_len(&self) -> usize {
        match self.mode {
            ModulationMode::Fourier => self.rank * self.rank,
            _ => 0,
        }
    }

    /// GSD divided by the coarsest configured GSD.
    pub fn eta_norm(&self, gsd_m: f64) -> Result<f64> {
        if !self.resolutions.iter().any(|&r| r == gsd_m) {
            return Err(Error::Config(format!(
                "GSD {gsd_m} is not among configured resolutions {:?}",
                self.resolutions
            )));
        }
        let max = self.resolutions.iter().cloned().fold(f64::MIN, f64::max);
        Ok(gsd_m / max)
    }
}

/// Conditioning for a single hypernetwork evaluation: one band, one hidden
/// layer. The one-hot parts are stored as indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionVector {
    pub eta_norm: f64,
    pub channel: usize,
    /// Hidden-layer index, `0` for the first hidden layer after the input layer.
    pub layer: usize,
}

impl ConditionVector {
    pub fn encode(&self, config: &ModelConfig) -> Result<Vec<f64>> {
        if !(self.eta_norm > 0.0 && self.eta_norm <= 1.0) {
            return Err(Error::Domain(format!(
                "eta_norm must lie in (0, 1], got {}",
                self.eta_norm
            )));
        }
        if self.channel >= config.n_channels {
            return Err(Error::Config(format!(
                "channel {} out of range for {} channels",
                self.channel, config.n_channels
            )));
        }
        if self.layer >= config.hidden_count() {
            return Err(Error::Config(format!(
                "hidden layer {} out of range for {} hidden layers",
                self.layer,
                config.hidden_count()
            )));
        }
        let mut v = vec![0.0; config.condition_width()];
        v[0] = self.eta_norm;
        v[1 + self.channel] = 1.0;
        v[1 + config.n_channels + self.layer] = 1.0;
        Ok(v)
    }
}

/// Conditioning for a whole band: expands to one [`ConditionVector`] per
/// hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandCondition {
    pub eta_norm: f64,
    pub channel: usize,
}

impl BandCondition {
    pub fn new(config: &ModelConfig, gsd_m: f64, channel: usize) -> Result<Self> {
        Ok(Self {
            eta_norm: config.eta_norm(gsd_m)?,
            channel,
        })
    }

    pub fn layer(&self, layer: usize) -> ConditionVector {
        ConditionVector {
            eta_norm: self.eta_norm,
            channel: self.channel,
            layer,
        }
    }

    /// `(L - 2) x condition_width`, row `l` conditioning hidden layer `l`.
    pub fn encode_all(&self, config: &ModelConfig) -> Result<Matrix> {
        let mut data = Vec::with_capacity(config.hidden_count() * config.condition_width());
        for l in 0..config.hidden_count() {
            data.extend(self.layer(l).encode(config)?);
        }
        Matrix::new(config.hidden_count(), config.condition_width(), data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Modulation {
    /// `f_mod`, `m x m`.
    Fourier(Matrix),
    /// `mu`, `1 x n`.
    Shift(Matrix),
    /// `kappa`, `1 x n`.
    Scale(Matrix),
    None,
}

impl Modulation {
    pub fn mode(&self) -> ModulationMode {
        match self {
            Modulation::Fourier(_) => ModulationMode::Fourier,
            Modulation::Shift(_) => ModulationMode::Shift,
            Modulation::Scale(_) => ModulationMode::Scale,
            Modulation::None => ModulationMode::None,
        }
    }
}

/// A fully connected layer, `weight` is `out x in` and `bias` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_bt(&self.weight)?;
        out.add_row_in_place(&self.bias)?;
        Ok(out)
    }

    fn uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, w_bound: f64, b_bound: f64) -> Self {
        Self {
            weight: uniform_sym(rng, fan_out, fan_in, w_bound),
            bias: uniform_sym(rng, 1, fan_out, b_bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HiddenWeights {
    /// `alpha: n x m`, `beta: m x n`.
    LowRank { alpha: Matrix, beta: Matrix },
    Full(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weights: HiddenWeights,
    pub bias: Matrix,
}

/// Every trainable array of a model. Also used, shape for shape, as the
/// container for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArrays {
    pub first: Dense,
    pub hidden: Vec<HiddenLayer>,
    pub output: Dense,
    pub hyper: Vec<Dense>,
}

impl ParamArrays {
    /// All arrays in canonical order: first layer (W, b); hidden layers
    /// ascending (W_alpha, W_beta, b or W, b); output layer (W, b);
    /// hypernetwork layers ascending (W, b).
    pub fn arrays(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.first.weight, &self.first.bias];
        for layer in &self.hidden {
            match &layer.weights {
                HiddenWeights::LowRank { alpha, beta } => {
                    out.push(alpha);
                    out.push(beta);
                }
                HiddenWeights::Full(w) => out.push(w),
            }
            out.push(&layer.bias);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        for d in &self.hyper {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.first.weight, &mut self.first.bias];
        for layer in &mut self.hidden {
            match &mut layer.weights {
                HiddenWeights::LowRank { alpha, beta } => {
                    out.push(alpha);
                    out.push(beta);
                }
                HiddenWeights::Full(w) => out.push(w),
            }
            out.push(&mut layer.bias);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        for d in &mut self.hyper {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Human-readable names matching [`ParamArrays::arrays`].
    pub fn array_names(&self) -> Vec<String> {
        let mut out = vec![String::from("first.weight"), String::from("first.bias")];
        for (i, layer) in self.hidden.iter().enumerate() {
            let l = i + 2;
            match &layer.weights {
                HiddenWeights::LowRank { .. } => {
                    out.push(format!("hidden{l}.alpha"));
                    out.push(format!("hidden{l}.beta"));
                }
                HiddenWeights::Full(_) => out.push(format!("hidden{l}.weight")),
            }
            out.push(format!("hidden{l}.bias"));
        }
        out.push("output.weight".into());
        out.push("output.bias".into());
        for i in 0..self.hyper.len() {
            out.push(format!("hyper{i}.weight"));
            out.push(format!("hyper{i}.bias"));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.data_mut().fill(0.0);
        }
        z
    }

    pub fn count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.is_finite())
    }

    /// Shape-checked `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamArrays) -> Result<()> {
        let src = other.arrays();
        let mut dst = self.arrays_mut();
        if src.len() != dst.len() {
            return Err(shape_err("param_axpy", (dst.len(), 0), (src.len(), 0)));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            d.axpy(alpha, s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub arrays: ParamArrays,
    /// Fixed `m x m` sample matrix (Fourier mode only): one `m`-vector drawn
    /// from `U(-2pi, 2pi)` repeated on every row. Never trained.
    pub z: Option<Matrix>,
}

fn uniform_sym(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    if bound == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    Matrix::uniform(rng, rows, cols, -bound, bound).expect("positive bound")
}

/// Draws every array of a fresh model from `rng`.
///
/// Backbone init follows the SIREN scheme: the coordinate layer is
/// `U(-1/2, 1/2)` (scaled by `omega0` when applied), dense hidden and output
/// weights are `U(-sqrt(6/n), sqrt(6/n))`. For low-rank hidden layers both
/// factors use `U(-r, r)` with `r = sqrt(6 / (m sqrt(n)))`, which gives the
/// assembled `W_alpha f W_beta` the same entry variance `2/n` when `f` has
/// uniformly random phases. The Fourier head bias places `phi` in
/// `U(-pi, pi)` and `Omega` at zero; the scale head bias starts at 1.
pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let n = config.hidden_width;
    let m = config.rank;
    let nf = n as f64;
    let dense_bound = libm::sqrt(6.0 / nf);
    let bias_bound = 1.0 / libm::sqrt(nf);

    let first = Dense::uniform(rng, 2, n, 0.5, 0.5);
    let mut hidden = Vec::with_capacity(config.hidden_count());
    for _ in 0..config.hidden_count() {
        let weights = match config.mode {
            ModulationMode::Fourier => {
                let r = libm::sqrt(6.0 / (m as f64 * libm::sqrt(nf)));
                HiddenWeights::LowRank {
                    alpha: uniform_sym(rng, n, m, r),
                    beta: uniform_sym(rng, m, n, r),
                }
            }
            _ => HiddenWeights::Full(uniform_sym(rng, n, n, dense_bound)),
        };
        hidden.push(HiddenLayer {
            weights,
            bias: uniform_sym(rng, 1, n, bias_bound),
        });
    }
    let output = Dense::uniform(rng, n, 1, dense_bound, bias_bound);

    let shapes = config.hyper_shapes();
    let mut hyper = Vec::with_capacity(shapes.len());
    for (i, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        if i + 1 < shapes.len() {
            let mut d = Dense::uniform(rng, fan_in, fan_out, libm::sqrt(6.0 / fan_in as f64), 0.0);
            d.bias.data_mut().fill(0.0);
            hyper.push(d);
        } else {
            let weight = uniform_sym(rng, fan_out, fan_in, 1.0 / fan_in as f64);
            let bias = match config.mode {
                ModulationMode::Fourier => {
                    let mut b = Matrix::zeros(1, fan_out);
                    for v in &mut b.data_mut()[m * m..] {
                        *v = rng.uniform(-PI, PI);
                    }
                    b
                }
                ModulationMode::Scale => Matrix::ones(1, fan_out),
                _ => Matrix::zeros(1, fan_out),
            };
            hyper.push(Dense { weight, bias });
        }
    }

    let z = if config.mode == ModulationMode::Fourier {
        let row = Matrix::uniform(rng, 1, m, -2.0 * PI, 2.0 * PI)?;
        let mut data = Vec::with_capacity(m * m);
        for _ in 0..m {
            data.extend_from_slice(row.data());
        }
        Some(Matrix::new(m, m, data)?)
    } else {
        None
    };

    Ok(ModelParams {
        config: config.clone(),
        arrays: ParamArrays {
            first,
            hidden,
            output,
            hyper,
        },
        z,
    })
}

/// Runs the hypernetwork MLP (ReLU trunk, linear head) on a batch of encoded
/// conditions, one per row.
pub(crate) fn hyper_mlp(hyper: &[Dense], inputs: &Matrix) -> Result<HyperTrace> {
    let mut acts = Vec::with_capacity(hyper.len());
    let mut pre = Vec::with_capacity(hyper.len().saturating_sub(1));
    let mut x = inputs.clone();
    for (i, layer) in hyper.iter().enumerate() {
        let z = layer.apply(&x)?;
        acts.push(x);
        if i + 1 < hyper.len() {
            x = z.map(|v| if v > 0.0 { v } else { 0.0 });
            pre.push(z);
        } else {
            x = z;
        }
    }
    Ok(HyperTrace {
        acts,
        pre,
        head: x,
        fourier_args: Vec::new(),
    })
}

/// Turns head rows into per-layer modulations. For Fourier mode also returns
/// the cosine arguments `Omega ⊙ Z + phi`, needed by the backward pass.
fn head_to_modulations(params: &ModelParams, head: &Matrix) -> Result<(Vec<Modulation>, Vec<Matrix>)> {
    let cfg = &params.config;
    let mut mods = Vec::with_capacity(head.rows());
    let mut args = Vec::new();
    for r in 0..head.rows() {
        let row = head.row(r);
        match cfg.mode {
            ModulationMode::Fourier => {
                let m = cfg.rank;
                let z = params
                    .z
                    .as_ref()
                    .ok_or_else(|| Error::Config("fourier model without Z".into()))?;
                let omega = Matrix::new(m, m, row[..m * m].to_vec())?;
                let phi = Matrix::new(m, m, row[m * m..].to_vec())?;
                let u = omega.hadamard(z)?.add(&phi)?;
                mods.push(Modulation::Fourier(u.map_cos()));
                args.push(u);
            }
            ModulationMode::Shift => mods.push(Modulation::Shift(Matrix::row_vector(row.to_vec()))),
            ModulationMode::Scale => mods.push(Modulation::Scale(Matrix::row_vector(row.to_vec()))),
            ModulationMode::None => mods.push(Modulation::None),
        }
    }
    Ok((mods, args))
}

fn check_hyper_input(params: &ModelParams) -> Result<()> {
    let cfg = &params.config;
    if !cfg.uses_hypernet() {
        return Err(Error::Mode {
            op: "hyper_forward",
            mode: cfg.mode.name(),
        });
    }
    if params.arrays.hyper.is_empty() {
        return Err(Error::Config("model has no hypernetwork layers".into()));
    }
    Ok(())
}

/// Modulation for one `(band, hidden layer)` condition.
pub fn hyper_forward(params: &ModelParams, cond: &ConditionVector) -> Result<Modulation> {
    check_hyper_input(params)?;
    let input = Matrix::row_vector(cond.encode(&params.config)?);
    let trace = hyper_mlp(&params.arrays.hyper, &input)?;
    let (mut mods, _) = head_to_modulations(params, &trace.head)?;
    Ok(mods.remove(0))
}

/// Modulations for all hidden layers of one band, plus the trace needed to
/// differentiate through the hypernetwork. Returns `Modulation::None` per
/// layer (and no trace) for unmodulated models.
pub fn band_modulations(
    params: &ModelParams,
    cond: &BandCondition,
) -> Result<(Vec<Modulation>, Option<HyperTrace>)> {
    let cfg = &params.config;
    if !cfg.uses_hypernet() {
        return Ok((vec![Modulation::None; cfg.hidden_count()], None));
    }
    check_hyper_input(params)?;
    let inputs = cond.encode_all(cfg)?;
    let mut trace = hyper_mlp(&params.arrays.hyper, &inputs)?;
    let (mods, args) = head_to_modulations(params, &trace.head)?;
    trace.fourier_args = args;
    Ok((mods, Some(trace)))
}

/// Explicit `n x n` weight `W_alpha · f_mod · W_beta` of hidden layer `layer`
/// (numbered `2..=L-1`).
pub fn assemble_weight(params: &ModelParams, layer: usize, modulation: &Modulation) -> Result<Matrix> {
    let cfg = &params.config;
    if layer < 2 || layer > cfg.layers - 1 {
        return Err(Error::Domain(format!(
            "modulated layers are 2..={}, got {layer}",
            cfg.layers - 1
        )));
    }
    let (alpha, beta) = match &params.arrays.hidden[layer - 2].weights {
        HiddenWeights::LowRank { alpha, beta } => (alpha, beta),
        HiddenWeights::Full(_) => {
            return Err(Error::Mode {
                op: "assemble_weight",
                mode: cfg.mode.name(),
            })
        }
    };
    let Modulation::Fourier(f) = modulation else {
        return Err(Error::Mode {
            op: "assemble_weight",
            mode: modulation.mode().name(),
        });
    };
    alpha.matmul(f)?.matmul(beta)
}

fn sin_cos(pre: &Matrix, with_cos: bool) -> (Matrix, Option<Matrix>) {
    if !with_cos {
        return (pre.map_sin(), None);
    }
    let mut s = pre.clone();
    let mut c = pre.clone();
    for ((sv, cv), &p) in s.data_mut().iter_mut().zip(c.data_mut().iter_mut()).zip(pre.data()) {
        let (a, b) = libm::sincos(p);
        *sv = a;
        *cv = b;
    }
    (s, Some(c))
}

/// Rejects coordinates outside `[-1, 1]²`.
pub fn check_coords(coords: &Matrix) -> Result<()> {
    if coords.cols() != 2 {
        return Err(shape_err("coords", coords.shape(), (coords.rows(), 2)));
    }
    if let Some(bad) = coords.data().iter().find(|v| !(v.abs() <= 1.0)) {
        return Err(Error::Domain(format!("coordinate {bad} outside [-1, 1]")));
    }
    Ok(())
}

/// Lenient alternative to [`check_coords`]: clamps into `[-1, 1]` and
/// reports whether anything was changed.
pub fn clamp_coords(coords: &Matrix) -> (Matrix, bool) {
    let out = coords.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) });
    let clamped = out.data().iter().zip(coords.data()).any(|(a, b)| a != b || b.is_nan());
    (out, clamped)
}

/// Backbone evaluation with explicit per-layer modulations.
pub fn forward_modulated(
    params: &ModelParams,
    coords: &Matrix,
    mods: &[Modulation],
    capture: bool,
) -> Result<(Matrix, Option<BackboneTrace>)> {
    check_coords(coords)?;
    let cfg = &params.config;
    let a = &params.arrays;
    if mods.len() != a.hidden.len() {
        return Err(shape_err("modulations", (a.hidden.len(), 1), (mods.len(), 1)));
    }
    let pre = a.first.apply(coords)?.scale(cfg.omega0);
    let (mut h, first_cos) = sin_cos(&pre, capture);

    let mut hidden_traces = Vec::new();
    for (layer, modulation) in a.hidden.iter().zip(mods) {
        let mut reduced = None;
        let mut mixed = None;
        let mut affine = None;
        let pre = match (&layer.weights, modulation) {
            (HiddenWeights::LowRank { alpha, beta }, Modulation::Fourier(f)) => {
                // h · (alpha f beta)ᵀ = ((h · betaᵀ) · fᵀ) · alphaᵀ
                let r = h.matmul_bt(beta)?;
                let c = r.matmul_bt(f)?;
                let mut p = c.matmul_bt(alpha)?;
                p.add_row_in_place(&layer.bias)?;
                if capture {
                    reduced = Some(r);
                    mixed = Some(c);
                }
                p
            }
            (HiddenWeights::Full(w), Modulation::Shift(mu)) => {
                let mut p = h.matmul_bt(w)?;
                p.add_row_in_place(&layer.bias)?;
                p.add_row_in_place(mu)?;
                p
            }
            (HiddenWeights::Full(w), Modulation::Scale(kappa)) => {
                let mut s = h.matmul_bt(w)?;
                s.add_row_in_place(&layer.bias)?;
                let p = s.mul_row(kappa)?;
                if capture {
                    affine = Some(s);
                }
                p
            }
            (HiddenWeights::Full(w), Modulation::None) => {
                let mut p = h.matmul_bt(w)?;
                p.add_row_in_place(&layer.bias)?;
                p
            }
            (_, m) => {
                return Err(Error::Mode {
                    op: "forward",
                    mode: m.mode().name(),
                })
            }
        };
        let (next, cos_pre) = sin_cos(&pre, capture);
        if capture {
            hidden_traces.push(HiddenTrace {
                input: h,
                reduced,
                mixed,
                affine,
                cos_pre: cos_pre.expect("captured"),
            });
        }
        h = next;
    }
    let out = a.output.apply(&h)?;
    if !out.is_finite() {
        return Err(Error::Numeric("forward produced a non-finite prediction".into()));
    }
    let trace = capture.then(|| BackboneTrace {
        first_cos: first_cos.expect("captured"),
        hidden: hidden_traces,
        last: h,
    });
    Ok((out, trace))
}

/// Predictions (`k x 1`, normalized pixel space) for one band's coordinates.
/// With `capture`, also returns everything [`crate::grad::backward`] needs.
pub fn forward(
    params: &ModelParams,
    coords: &Matrix,
    cond: &BandCondition,
    capture: bool,
) -> Result<(Matrix, Option<ForwardTrace>)> {
    let (mods, hyper) = band_modulations(params, cond)?;
    let (pred, backbone) = forward_modulated(params, coords, &mods, capture)?;
    let trace = backbone.map(|backbone| ForwardTrace {
        coords: coords.clone(),
        backbone,
        modulations: mods,
        hyper,
    });
    Ok((pred, trace))
}

/// Evaluates `coords` in row chunks of at most `chunk` and concatenates.
/// Rows are independent, so the result is bitwise identical to one pass.
pub fn predict_chunked(
    params: &ModelParams,
    coords: &Matrix,
    cond: &BandCondition,
    chunk: usize,
) -> Result<Matrix> {
    let (mods, _) = band_modulations(params, cond)?;
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(coords.rows());
    let mut start = 0;
    while start < coords.rows() {
        let end = (start + chunk).min(coords.rows());
        let idx: Vec<usize> = (start..end).collect();
        let (pred, _) = forward_modulated(params, &coords.select_rows(&idx), &mods, false)?;
        out.extend_from_slice(pred.data());
        start = end;
    }
    Matrix::new(coords.rows(), 1, out)
}
