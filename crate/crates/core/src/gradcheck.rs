//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the forward pass; it never consults the
//! tape's backward rules, so it can serve as an independent check on them.

use crate::numerics::{NumericsError, Tape, Tensor, Var};

/// Denominator floor for relative errors. Gradients below this magnitude are
/// compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(x + h) - f(x - h)) / 2h` for a scalar-valued function of one coordinate.
pub fn central_difference<F>(mut f: F, x: f64, h: f64) -> Result<f64, NumericsError>
where
    F: FnMut(f64) -> Result<f64, NumericsError>,
{
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Compares the tape gradient of `build` against central differences on every
/// coordinate of every input; returns the maximum relative error.
pub fn check_gradient<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.detached())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).values()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.detached())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detached).collect();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].values()[i];
            let numeric = central_difference(
                |x| {
                    probe[k].values_mut()[i] = x;
                    eval(&probe)
                },
                x0,
                h,
            )?;
            probe[k].values_mut()[i] = x0;
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}
