//! Central finite-difference gradient checking in `f64`.
//!
//! The numeric side only ever calls the forward closure, so it is independent
//! of the tape's backward pass.

use crate::error::Result;
use crate::param::Parameter;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one check: worst relative error and where it occurred.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare as equal.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks d(loss)/d(inputs) for a scalar `loss` built by `f` from leaves.
///
/// `f` receives the tape and one input var per tensor in `inputs`.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|t| tape.input(t.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.data().len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report = GradReport {
                    max_rel_error: err,
                    worst_input: i,
                    worst_index: j,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Checks d(loss)/d(parameter) at the listed `(parameter, element)` pairs.
///
/// `f` must build the loss from the current parameter values; it is called
/// once with gradients and twice per probed element without.
pub fn check_params<F>(params: &[Parameter<f64>], probes: &[(usize, usize)], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape<f64>) -> Result<Var>,
{
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = f(&tape)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = probes.iter().map(|&(p, j)| params[p].grad().data()[j]).collect();

    let eval = || -> Result<f64> {
        let tape = Tape::new();
        let loss = f(&tape)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (&(p, j), &a) in probes.iter().zip(&analytic) {
        let orig = params[p].value().data()[j];
        params[p].update(|d| d[j] = orig + h);
        let up = eval()?;
        params[p].update(|d| d[j] = orig - h);
        let down = eval()?;
        params[p].update(|d| d[j] = orig);
        let numeric = (up - down) / (2.0 * h);
        let err = rel_error(a, numeric);
        if err > report.max_rel_error {
            report = GradReport {
                max_rel_error: err,
                worst_input: p,
                worst_index: j,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
