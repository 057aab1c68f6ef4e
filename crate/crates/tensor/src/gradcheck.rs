//! Central finite-difference gradient checks at 64-bit precision.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms: the central-difference round-off floor for O(1) losses at
/// `h = 1e-5` is around 1e-10.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = relative_error(analytic, numeric);
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((input, elem));
        }
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &GradcheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.worst = other.worst;
        }
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Which elements of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// Up to this many evenly spread elements per input.
    Spread(usize),
}

/// Flat indices probed for a tensor of `numel` elements.
pub fn probe_indices(numel: usize, probe: Probe) -> Vec<usize> {
    match probe {
        Probe::All => (0..numel).collect(),
        Probe::Spread(k) if k >= numel => (0..numel).collect(),
        Probe::Spread(k) => {
            // Stride coprime-ish with typical tensor dims, to avoid aliasing
            // onto a single channel.
            let step = numel as f64 / k as f64;
            (0..k).map(|i| ((i as f64 + 0.37) * step) as usize % numel).collect()
        }
    }
}

/// Compares analytic gradients of `f(inputs)` against central differences.
///
/// `f` builds a scalar loss from leaf variables bound to `inputs`; it is
/// re-run for every perturbed element.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], step: f64, probe: Probe) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    if g.value(loss).numel() != 1 {
        return Err(TensorError::NonScalarLoss(g.shape(loss).to_vec()));
    }
    g.backward(loss)?;

    let mut report = GradcheckReport::default();
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for k in probe_indices(inputs[i].numel(), probe) {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            report.record(i, k, analytic.data()[k], (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
