//! Finite-difference verification of recorded gradients.

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar-valued function that can be recorded at any precision.
pub trait ScalarFn {
    fn eval<F: Real>(&self, g: &mut Graph<F>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` with the largest relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Compares the backward pass of `f` evaluated in precision `F` against
/// central differences `(f(x+ε) − f(x−ε)) / 2ε` evaluated in 64-bit.
///
/// Relative error per element is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F: Real, S: ScalarFn>(
    f: &S,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if epsilon <= 0.0 {
        return Err(Error::invalid("grad_check: epsilon must be positive"));
    }
    let analytic = analytic_grads::<F, S>(f, inputs)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, grad) in analytic.iter().enumerate() {
        for j in 0..work[ii].len() {
            let orig = work[ii].data()[j];
            work[ii].data_mut()[j] = orig + epsilon;
            let fp = eval_f64(f, &work)?;
            work[ii].data_mut()[j] = orig - epsilon;
            let fm = eval_f64(f, &work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = grad[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ii, j);
            }
        }
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}

fn analytic_grads<F: Real, S: ScalarFn>(f: &S, inputs: &[Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.cast())).collect();
    let out = f.eval(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid("grad_check: function is not scalar-valued"));
    }
    g.backward(out)?;
    Ok(vars.iter().map(|&v| g.grad_or_zeros(v).to_f64_vec()).collect())
}

fn eval_f64<S: ScalarFn>(f: &S, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f.eval(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::invalid("grad_check: function is not scalar-valued"));
    }
    Ok(g.value(out).item())
}
