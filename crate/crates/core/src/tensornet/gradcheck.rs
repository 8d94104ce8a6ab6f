//! Central finite-difference checks of analytic gradients (f64).

use crate::error::Result;
use crate::rng::StreamRng;

use super::model::{ForwardOutput, Model, Upstream};
use super::params::ParamSet;
use super::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst relative error of `analytic` against central differences of `f`
/// at every coordinate of `x`.
pub fn check_function(x: &mut [f64], f: impl Fn(&[f64]) -> f64, analytic: &[f64], eps: f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(x);
        x[i] = orig - eps;
        let minus = f(x);
        x[i] = orig;
        worst = worst.max(relative_error(analytic[i], (plus - minus) / (2.0 * eps)));
    }
    worst
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_gradient: f64,
    /// Coordinates whose `±eps` probe changed the activation pattern and
    /// were re-probed with a smaller step.
    pub kinked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn kinked(&self) -> usize {
        self.tensors.iter().map(|t| t.kinked).sum()
    }
}

/// Step shrink factor and retry count for probes that straddle a kink.
const KINK_SHRINK: f64 = 10.0;
const KINK_RETRIES: usize = 4;

/// A loss over network outputs returning its value and output gradients.
pub trait LossFn: Fn(&ForwardOutput<f64>) -> Result<(f64, Upstream<f64>)> {}
impl<F: Fn(&ForwardOutput<f64>) -> Result<(f64, Upstream<f64>)>> LossFn for F {}

fn pick_coordinates(n: usize, limit: usize, rng: &mut StreamRng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if n <= limit {
        return all;
    }
    // Partial Fisher-Yates: the first `limit` entries become a uniform sample.
    for i in 0..limit {
        let j = i + rng.below(n - i);
        all.swap(i, j);
    }
    all.truncate(limit);
    all.sort_unstable();
    all
}

/// Compares `analytic` against central differences of `loss_fn(model(batch))`
/// on up to `per_tensor` coordinates of every parameter tensor. A probe whose
/// `±eps` points leave the linear region of the unperturbed parameters is
/// repeated with a smaller step, since a difference across a ReLU or
/// max-pool switch does not estimate the derivative.
pub fn grad_check_against(
    model: &mut Model<f64>,
    batch: &Tensor<f64>,
    loss_fn: &impl LossFn,
    analytic: &ParamSet<f64>,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = StreamRng::new(seed);
    let base = model.infer_with_pattern(batch)?.1;
    let mut tensors = Vec::with_capacity(model.params.len());
    for ti in 0..model.params.len() {
        let coords = pick_coordinates(model.params.at(ti).numel(), per_tensor, &mut rng);
        let mut worst = 0.0f64;
        let mut kinked = 0;
        for &c in &coords {
            let orig = model.params.at(ti).data()[c];
            let mut step = eps;
            let mut numeric = 0.0;
            for attempt in 0..=KINK_RETRIES {
                model.params.at_mut(ti).data_mut()[c] = orig + step;
                let (out_plus, pat_plus) = model.infer_with_pattern(batch)?;
                model.params.at_mut(ti).data_mut()[c] = orig - step;
                let (out_minus, pat_minus) = model.infer_with_pattern(batch)?;
                model.params.at_mut(ti).data_mut()[c] = orig;
                numeric = (loss_fn(&out_plus)?.0 - loss_fn(&out_minus)?.0) / (2.0 * step);
                if pat_plus == base && pat_minus == base {
                    break;
                }
                if attempt == 0 {
                    kinked += 1;
                }
                step /= KINK_SHRINK;
            }
            worst = worst.max(relative_error(analytic.at(ti).data()[c], numeric));
        }
        tensors.push(TensorCheck {
            name: model.params.names()[ti].clone(),
            coordinates: coords.len(),
            max_rel_error: worst,
            max_abs_gradient: analytic.at(ti).max_abs(),
            kinked,
        });
    }
    Ok(GradCheckReport {
        max_rel_error: tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max),
        tensors,
    })
}

/// Runs forward + backward and checks the resulting parameter gradients.
pub fn grad_check(
    model: &mut Model<f64>,
    batch: &Tensor<f64>,
    loss_fn: &impl LossFn,
    eps: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let out = model.forward(batch)?;
    let (_, upstream) = loss_fn(&out)?;
    let analytic = model.backward(&upstream)?;
    model.clear_cache();
    grad_check_against(model, batch, loss_fn, &analytic, eps, per_tensor, seed)
}
