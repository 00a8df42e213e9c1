//! Reverse pass for the fixed network topology in [`crate::model`].
//!
//! `backward` differentiates the summed squared error `sum(r²)` where `r` is
//! the residual `prediction - target`; callers apply any `1/k` averaging.

use alloc::format;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::error::{shape_err, Error, Result};
use crate::model::{self, BandCondition, HiddenWeights, ModelParams, Modulation, ModulationMode, ParamArrays};
use crate::tensor::Matrix;

/// Hypernetwork activations for one band (one row per hidden layer).
#[derive(Debug, Clone)]
pub struct HyperTrace {
    /// Input to each hypernetwork layer; `acts[0]` is the encoded condition.
    pub acts: Vec<Matrix>,
    /// Pre-ReLU values of the trunk layers.
    pub pre: Vec<Matrix>,
    pub head: Matrix,
    /// Fourier mode: `Omega ⊙ Z + phi` per hidden layer.
    pub fourier_args: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct HiddenTrace {
    pub input: Matrix,
    /// Low-rank: `h · W_betaᵀ`.
    pub reduced: Option<Matrix>,
    /// Low-rank: `h · W_betaᵀ · f_modᵀ`.
    pub mixed: Option<Matrix>,
    /// Scale mode: `h · Wᵀ + b` before multiplying by kappa.
    pub affine: Option<Matrix>,
    pub cos_pre: Matrix,
}

#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub first_cos: Matrix,
    pub hidden: Vec<HiddenTrace>,
    /// Input of the output layer.
    pub last: Matrix,
}

/// Everything one `(batch, band)` forward call cached for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub coords: Matrix,
    pub backbone: BackboneTrace,
    pub modulations: Vec<Modulation>,
    pub hyper: Option<HyperTrace>,
}

/// Gradients, one array per trainable array of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ParamArrays);

impl Deref for GradientSet {
    type Target = ParamArrays;
    fn deref(&self) -> &ParamArrays {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ParamArrays {
        &mut self.0
    }
}

impl GradientSet {
    pub fn zeros_for(params: &ModelParams) -> Self {
        GradientSet(params.arrays.zeros_like())
    }

    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        self.0.axpy(1.0, &other.0)
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.0.arrays_mut() {
            for v in a.data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Gradient of `sum(residual²)` with respect to every trainable array.
pub fn backward(trace: &ForwardTrace, params: &ModelParams, residual: &Matrix) -> Result<GradientSet> {
    let a = &params.arrays;
    let bt = &trace.backbone;
    let k = trace.coords.rows();
    if residual.shape() != (k, 1) {
        return Err(shape_err("backward.residual", residual.shape(), (k, 1)));
    }
    if bt.hidden.len() != a.hidden.len() || trace.modulations.len() != a.hidden.len() {
        return Err(shape_err(
            "backward.trace",
            (bt.hidden.len(), trace.modulations.len()),
            (a.hidden.len(), a.hidden.len()),
        ));
    }
    let mut grads = GradientSet::zeros_for(params);

    let g_out = residual.scale(2.0);
    grads.output.weight = g_out.matmul_at(&bt.last)?;
    grads.output.bias = g_out.sum_rows();
    let mut g_h = g_out.matmul(&a.output.weight)?;

    // d loss / d modulation payload, per hidden layer
    let mut g_mods: Vec<Option<Matrix>> = Vec::with_capacity(a.hidden.len());
    for l in (0..a.hidden.len()).rev() {
        let layer = &a.hidden[l];
        let ht = &bt.hidden[l];
        let g_pre = g_h.hadamard(&ht.cos_pre)?;
        let g_layer = &mut grads.hidden[l];
        let (g_in, g_mod) = match (&layer.weights, &trace.modulations[l]) {
            (HiddenWeights::LowRank { alpha, beta }, Modulation::Fourier(f)) => {
                let reduced = ht.reduced.as_ref().ok_or_else(|| missing("reduced"))?;
                let mixed = ht.mixed.as_ref().ok_or_else(|| missing("mixed"))?;
                let g_mixed = g_pre.matmul(alpha)?;
                let g_f = g_mixed.matmul_at(reduced)?;
                let g_reduced = g_mixed.matmul(f)?;
                let HiddenWeights::LowRank {
                    alpha: ga,
                    beta: gb,
                } = &mut g_layer.weights
                else {
                    unreachable!("gradient mirrors parameter layout")
                };
                *ga = g_pre.matmul_at(mixed)?;
                *gb = g_reduced.matmul_at(&ht.input)?;
                g_layer.bias = g_pre.sum_rows();
                (g_reduced.matmul(beta)?, Some(g_f))
            }
            (HiddenWeights::Full(w), modulation) => {
                let (g_affine, g_mod) = match modulation {
                    Modulation::Shift(_) => (g_pre.clone(), Some(g_pre.sum_rows())),
                    Modulation::Scale(kappa) => {
                        let affine = ht.affine.as_ref().ok_or_else(|| missing("affine"))?;
                        (g_pre.mul_row(kappa)?, Some(g_pre.hadamard(affine)?.sum_rows()))
                    }
                    Modulation::None => (g_pre.clone(), None),
                    Modulation::Fourier(_) => {
                        return Err(Error::Mode {
                            op: "backward",
                            mode: "fourier",
                        })
                    }
                };
                let HiddenWeights::Full(gw) = &mut g_layer.weights else {
                    unreachable!("gradient mirrors parameter layout")
                };
                *gw = g_affine.matmul_at(&ht.input)?;
                g_layer.bias = g_affine.sum_rows();
                (g_affine.matmul(w)?, g_mod)
            }
            (HiddenWeights::LowRank { .. }, m) => {
                return Err(Error::Mode {
                    op: "backward",
                    mode: m.mode().name(),
                })
            }
        };
        g_mods.push(g_mod);
        g_h = g_in;
    }
    g_mods.reverse();

    let omega0 = params.config.omega0;
    let g_first = g_h.hadamard(&bt.first_cos)?.scale(omega0);
    grads.first.weight = g_first.matmul_at(&trace.coords)?;
    grads.first.bias = g_first.sum_rows();

    if let Some(hyper) = &trace.hyper {
        let g_head = head_gradient(params, hyper, &g_mods)?;
        hyper_backward(&a.hyper, hyper, g_head, &mut grads.0.hyper)?;
    }
    Ok(grads)
}

fn missing(what: &str) -> Error {
    Error::Config(format!("forward trace lacks `{what}`; capture was off"))
}

/// Stacks per-layer payload gradients into a gradient for the head rows.
fn head_gradient(params: &ModelParams, hyper: &HyperTrace, g_mods: &[Option<Matrix>]) -> Result<Matrix> {
    let cfg = &params.config;
    let width = cfg.head_width();
    let mut data = Vec::with_capacity(g_mods.len() * width);
    for (l, g) in g_mods.iter().enumerate() {
        let g = g.as_ref().ok_or_else(|| missing("modulation gradient"))?;
        match cfg.mode {
            ModulationMode::Fourier => {
                let z = params.z.as_ref().ok_or_else(|| missing("Z"))?;
                let u = &hyper.fourier_args[l];
                // f = cos(u), u = Omega ⊙ Z + phi
                let g_u = g.hadamard(&u.map_sin())?.scale(-1.0);
                data.extend_from_slice(g_u.hadamard(z)?.data());
                data.extend_from_slice(g_u.data());
            }
            _ => data.extend_from_slice(g.data()),
        }
    }
    Matrix::new(g_mods.len(), width, data)
}

fn hyper_backward(
    layers: &[model::Dense],
    trace: &HyperTrace,
    mut g: Matrix,
    out: &mut [model::Dense],
) -> Result<()> {
    for i in (0..layers.len()).rev() {
        out[i].weight = g.matmul_at(&trace.acts[i])?;
        out[i].bias = g.sum_rows();
        if i > 0 {
            let g_act = g.matmul(&layers[i].weight)?;
            let mask = trace.pre[i - 1].map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            g = g_act.hadamard(&mask)?;
        }
    }
    Ok(())
}

/// One band's worth of training samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub coords: Matrix,
    pub targets: Matrix,
    pub cond: BandCondition,
}

/// `sum(r²)` over all batches.
pub fn summed_loss(params: &ModelParams, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let (pred, _) = model::forward(params, &b.coords, &b.cond, false)?;
        total += pred.sub(&b.targets)?.data().iter().map(|r| r * r).sum::<f64>();
    }
    if !total.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok(total)
}

/// Analytic gradient of [`summed_loss`], accumulated over batches in order.
pub fn loss_gradient(params: &ModelParams, batches: &[Batch]) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::zeros_for(params);
    let mut total = 0.0;
    for b in batches {
        let (pred, trace) = model::forward(params, &b.coords, &b.cond, true)?;
        let residual = pred.sub(&b.targets)?;
        total += residual.data().iter().map(|r| r * r).sum::<f64>();
        grads.accumulate(&backward(&trace.expect("captured"), params, &residual)?)?;
    }
    if !total.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok((total, grads))
}

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Array index (canonical order) and entry of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares [`backward`] with central differences over every trainable
/// entry. The numeric derivative is the five-point stencil
/// `(8 (L(x+h) - L(x-h)) - (L(x+2h) - L(x-2h))) / 12h`, evaluated at `h` and
/// `h/2` and Richardson-extrapolated, leaving an `O(h⁶)` truncation error.
/// Lower orders are not enough on the `omega0`-scaled coordinate layer at
/// `h = 1e-3`. Returns the maximum of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check(params: &ModelParams, batches: &[Batch], step: f64) -> Result<f64> {
    let all: Vec<usize> = (0..params.arrays.arrays().len()).collect();
    Ok(finite_difference_check_arrays(params, batches, step, &all)?.max_relative_error)
}

/// [`finite_difference_check`] restricted to the arrays listed in `selection`
/// (canonical indices). An empty selection checks nothing and reports 0.
///
/// If perturbing an entry flips any hypernetwork ReLU, the difference
/// quotient straddles a kink and says nothing about the derivative; the step
/// for that entry is reduced tenfold (up to three times) until every
/// perturbed evaluation keeps the unperturbed activation pattern.
pub fn finite_difference_check_arrays(
    params: &ModelParams,
    batches: &[Batch],
    step: f64,
    selection: &[usize],
) -> Result<GradCheck> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Domain(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = loss_gradient(params, batches)?;
    let analytic_arrays = analytic.arrays();
    let base_pattern = relu_pattern(params, batches)?;

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut checked = 0;
    for &ai in selection {
        let len = analytic_arrays
            .get(ai)
            .ok_or_else(|| Error::Domain(format!("no trainable array {ai}")))?
            .len();
        for e in 0..len {
            let original = probe.arrays.arrays()[ai].data()[e];
            let mut h = step;
            let mut numeric = 0.0;
            for attempt in 0..4 {
                let mut losses = [0.0; 6];
                let mut same_pattern = true;
                for (slot, offset) in [2.0, 1.0, 0.5, -0.5, -1.0, -2.0].into_iter().enumerate() {
                    probe.arrays.arrays_mut()[ai].data_mut()[e] = original + offset * h;
                    losses[slot] = summed_loss(&probe, batches)?;
                    same_pattern &= relu_pattern(&probe, batches)? == base_pattern;
                }
                probe.arrays.arrays_mut()[ai].data_mut()[e] = original;
                // differences first: equal losses must give exactly zero
                let (d2, d1, dh) = (losses[0] - losses[5], losses[1] - losses[4], losses[2] - losses[3]);
                let coarse = (8.0 * d1 - d2) / (12.0 * h);
                let fine = (8.0 * dh - d1) / (6.0 * h);
                numeric = fine + (fine - coarse) / 15.0;
                if same_pattern || attempt == 3 {
                    break;
                }
                h *= 0.1;
            }
            let exact = analytic_arrays[ai].data()[e];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                worst_at = Some((ai, e));
            }
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        worst: worst_at,
        checked,
    })
}

fn relu_pattern(params: &ModelParams, batches: &[Batch]) -> Result<Vec<bool>> {
    let mut bits = Vec::new();
    if !params.config.uses_hypernet() {
        return Ok(bits);
    }
    for b in batches {
        let inputs = b.cond.encode_all(&params.config)?;
        let trace = model::hyper_mlp(&params.arrays.hyper, &inputs)?;
        for p in &trace.pre {
            bits.extend(p.data().iter().map(|&v| v > 0.0));
        }
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, ModelConfig};
    use crate::tensor::Rng;
    use alloc::vec;

    fn cfg(mode: ModulationMode) -> ModelConfig {
        ModelConfig {
            layers: 4,
            hidden_width: 3,
            rank: 2,
            hyper_layers: 2,
            hyper_width: 4,
            mode,
            omega0: 30.0,
            n_channels: 2,
            resolutions: vec![10.0, 20.0],
            seed: 0,
            strict_low_rank: false,
        }
    }

    fn batch(config: &ModelConfig, rng: &mut Rng, k: usize) -> Batch {
        Batch {
            coords: Matrix::uniform(rng, k, 2, -1.0, 1.0).unwrap(),
            targets: Matrix::uniform(rng, k, 1, 0.0, 1.0).unwrap(),
            cond: BandCondition::new(config, 20.0, 1).unwrap(),
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let c = cfg(ModulationMode::Fourier);
        let p = init(&c, &mut Rng::new(1)).unwrap();
        let b = batch(&c, &mut Rng::new(2), 2);
        let (_, trace) = model::forward(&p, &b.coords, &b.cond, true).unwrap();
        let g = backward(&trace.unwrap(), &p, &Matrix::zeros(2, 1)).unwrap();
        assert!(g.arrays().iter().all(|a| a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tiny_config_matches_finite_differences() {
        for mode in [ModulationMode::Fourier, ModulationMode::Shift, ModulationMode::Scale, ModulationMode::None] {
            let c = cfg(mode);
            let p = init(&c, &mut Rng::new(3)).unwrap();
            let b = batch(&c, &mut Rng::new(4), 2);
            let err = finite_difference_check(&p, &[b], 1e-3).unwrap();
            assert!(err < 1e-4, "{mode:?}: {err}");
        }
    }

    #[test]
    fn duplicated_row_doubles_its_contribution() {
        let c = cfg(ModulationMode::Fourier);
        let p = init(&c, &mut Rng::new(5)).unwrap();
        let one = batch(&c, &mut Rng::new(6), 1);
        let two = Batch {
            coords: one.coords.select_rows(&[0, 0]),
            targets: one.targets.select_rows(&[0, 0]),
            cond: one.cond,
        };
        let (_, g1) = loss_gradient(&p, &[one]).unwrap();
        let (_, g2) = loss_gradient(&p, &[two]).unwrap();
        for (a, b) in g1.arrays().iter().zip(g2.arrays()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(2.0 * x, *y);
            }
        }
    }

    #[test]
    fn empty_selection_reports_zero() {
        let c = cfg(ModulationMode::Shift);
        let p = init(&c, &mut Rng::new(7)).unwrap();
        let b = batch(&c, &mut Rng::new(8), 2);
        let check = finite_difference_check_arrays(&p, &[b], 1e-3, &[]).unwrap();
        assert_eq!(check.max_relative_error, 0.0);
        assert_eq!(check.checked, 0);
    }

    #[test]
    fn backward_is_deterministic() {
        let c = cfg(ModulationMode::Scale);
        let p = init(&c, &mut Rng::new(9)).unwrap();
        let b = batch(&c, &mut Rng::new(10), 3);
        assert_eq!(loss_gradient(&p, &[b.clone()]).unwrap(), loss_gradient(&p, &[b]).unwrap());
    }

    #[test]
    fn sine_derivative_closed_form() {
        use core::f64::consts::PI;
        for u in [0.0, PI / 2.0, PI] {
            let h = 1e-6;
            let numeric = (libm::sin(u + h) - libm::sin(u - h)) / (2.0 * h);
            assert!((numeric - libm::cos(u)).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_residual_shape() {
        let c = cfg(ModulationMode::None);
        let p = init(&c, &mut Rng::new(1)).unwrap();
        let b = batch(&c, &mut Rng::new(2), 2);
        let (_, trace) = model::forward(&p, &b.coords, &b.cond, true).unwrap();
        assert!(matches!(
            backward(&trace.unwrap(), &p, &Matrix::zeros(3, 1)),
            Err(Error::Shape { .. })
        ));
    }
}
