//! Central finite-difference check of recorded gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|autodiff - numeric|_2 / max(|autodiff|_2 + |numeric|_2, ZERO_GRADIENT_FLOOR)` over the inputs.
    pub max_rel_err: f64,
    /// Number of perturbed entries.
    pub checked: usize,
    /// Entries whose one-sided slopes disagreed and were re-measured with a finer step.
    pub refined: usize,
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Perturb at most this many evenly spaced entries per input.
    pub max_entries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries: usize::MAX,
        }
    }
}

/// One-sided slopes may differ by `KINK_SLOPE_GAP * h * max(1, |slope|)` before an entry is refined.
pub const KINK_SLOPE_GAP: f64 = 10.0;

/// Gradient norms below this are compared absolutely.
pub const ZERO_GRADIENT_FLOOR: f64 = 1e-7;

fn projection_weight(i: usize) -> f64 {
    (1.3 * i as f64 + 0.7).sin() + 0.25
}

fn evaluate(inputs: &[Tensor<f64>], build: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let n = g.value(out).len();
    // non-scalar outputs are reduced against a fixed pseudo-random weighting
    let loss = if n == 1 {
        g.reshape(out, &[1])?
    } else {
        let shape = g.shape(out).to_vec();
        let w: Vec<f64> = (0..n).map(projection_weight).collect();
        let w = g.constant(Tensor::new(&shape, w)?)?;
        let p = g.mul(out, w)?;
        g.sum(p)?
    };
    Ok((g, vars, loss))
}

/// Compares reverse-mode gradients of `build` with respect to every input
/// against central differences.
///
/// `build` receives the inputs as trainable leaves and returns any tensor;
/// non-scalar results are contracted with a fixed weighting first.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (mut g, vars, loss) = evaluate(inputs, &build)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        refined: 0,
    };
    let loss_at = |work: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, l) = evaluate(work, &build)?;
        Ok(g.data(l)[0])
    };
    let f0 = loss_at(inputs)?;
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        let stride = t.len().div_ceil(opts.max_entries.max(1)).max(1);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in (0..t.len()).step_by(stride) {
            let x0 = t.data()[i];
            let mut central = |h: f64| -> Result<(f64, f64, f64)> {
                work[k].data_mut()[i] = x0 + h;
                let up = loss_at(&work)?;
                work[k].data_mut()[i] = x0 - h;
                let down = loss_at(&work)?;
                work[k].data_mut()[i] = x0;
                Ok(((up - down) / (2.0 * h), (up - f0) / h, (f0 - down) / h))
            };
            let (mut numeric, fwd, bwd) = central(opts.step)?;
            // a kink inside [x - h, x + h] shows up as disagreeing one-sided slopes
            if (fwd - bwd).abs() > KINK_SLOPE_GAP * opts.step * numeric.abs().max(1.0) {
                numeric = central(opts.step * 1e-2)?.0;
                report.refined += 1;
            }
            let a = analytic[k][i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
            report.checked += 1;
        }
        // gradients that vanish analytically leave only roundoff in the numeric estimate
        let rel = diff.sqrt() / (na.sqrt() + nn.sqrt()).max(ZERO_GRADIENT_FLOOR);
        if !rel.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                term: "gradcheck".into(),
            });
        }
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    Ok(report)
}
