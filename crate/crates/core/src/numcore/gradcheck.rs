use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Gradient magnitudes below this are compared absolutely rather than relatively.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

/// Outcome of [`grad_check`]: the worst coordinate found.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Per coordinate the error is `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`; the
/// maximum over every coordinate of every input is reported.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let v = f(&tape, &vars)?.value().item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check"))
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..a.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let an = a.data()[j];
            let err = (an - numeric).abs() / an.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.input = i;
                report.index = j;
                report.analytic = an;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
