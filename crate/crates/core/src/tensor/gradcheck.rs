//! Central-difference gradient checking against the tape.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Central differences carry
/// roundoff near `ε_mach · |f| / ε`, about 1e-10 at ε = 1e-6, so gradients
/// below the floor are in effect compared in absolute terms.
const DENOM_FLOOR: f64 = 1e-6;

/// Largest relative error between tape gradients and central differences
/// `(f(x+εe) − f(x−εe)) / 2ε`, using the denominator `max(|a|, |b|, 1e-6)`.
///
/// `f` builds a scalar on a fresh tape from the registered input. It must be
/// deterministic: two unperturbed evaluations that disagree bitwise are
/// reported as a contract error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!("objective must be scalar, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.value(out).clone();
    if base.len() != 1 {
        return Err(Error::Contract(format!("objective must be scalar, got {:?}", base.shape())));
    }
    if eval(inputs)?.to_bits() != base.data()[0].to_bits() {
        return Err(Error::Contract("objective is not deterministic".into()));
    }
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            probe[k].data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[idx];
            let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
