//! Central-difference gradient verification.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest disagreement found by [`gradient_report`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradReport {
    /// Largest relative error over all elements.
    pub max_rel_err: f64,
    /// Parameter and flat element index where it occurred.
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of elements compared.
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences `(f(p+h) - f(p-h)) / 2h`, element by element.
///
/// Returns the largest relative error, with `max(|a|, |b|, 1e-8)` as the
/// denominator. `f` receives the bound parameter vars in the same order as
/// `params` and must return a single-element node.
pub fn check_gradients<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(gradient_report(f, params, h)?.max_rel_err)
}

/// Finite-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+h) - f(p-h)) / 2h`, error `O(h^2)`.
    Central2,
    /// `(f(p-2h) - 8 f(p-h) + 8 f(p+h) - f(p+2h)) / 12h`, error `O(h^4)`.
    /// Tolerates a larger `h`, which shrinks the roundoff floor on
    /// near-zero gradient components.
    Central4,
}

/// [`check_gradients`] with the location and values of the worst element.
pub fn gradient_report<F>(f: F, params: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_report_with(f, params, h, Stencil::Central2)
}

/// [`gradient_report`] with a choice of finite-difference stencil.
pub fn gradient_report_with<F>(f: F, params: &[Tensor], h: f64, stencil: Stencil) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradReport::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        let orig = params[pi].data().to_vec();
        for (ei, &a) in analytic.iter().enumerate() {
            let mut bumped = orig.clone();
            let mut at = |offset: f64, work: &mut Vec<Tensor>| -> Result<f64> {
                bumped[ei] = orig[ei] + offset;
                work[pi].assign(&bumped)?;
                eval(work)
            };
            let numeric = match stencil {
                Stencil::Central2 => (at(h, &mut work)? - at(-h, &mut work)?) / (2.0 * h),
                Stencil::Central4 => {
                    let (p1, m1) = (at(h, &mut work)?, at(-h, &mut work)?);
                    let (p2, m2) = (at(2.0 * h, &mut work)?, at(-2.0 * h, &mut work)?);
                    (m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * h)
                }
            };
            work[pi].assign(&orig)?;
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_err || report.checked == 1 {
                report = GradReport {
                    max_rel_err: rel,
                    param: pi,
                    index: ei,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
