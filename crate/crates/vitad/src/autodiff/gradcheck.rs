//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::tensor::{Real, Tensor, TensorError, TensorResult};

/// Relative-error floor from the comparison formula.
const DENOM_FLOOR: f64 = 1e-12;

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`. Returns
/// `max_i |analytic_i − numeric_i| / (|numeric_i| + 1e-12)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: T) -> TensorResult<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> TensorResult<Var>,
{
    let errs = grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// Multi-input form of [`grad_check`]: every input is a tracked leaf and the
/// result holds one maximum relative error per input.
pub fn grad_check_multi<T, F>(f: F, inputs: &[Tensor<T>], h: T) -> TensorResult<Vec<f64>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> TensorResult<Var>,
{
    if h <= T::zero() {
        return Err(TensorError::Contract("grad_check step must be positive".into()));
    }
    let eval = |values: &[Tensor<T>]| -> TensorResult<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let mut max_err = 0.0f64;
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = ((plus - minus) / (h + h)).as_f64();
            let a = analytic.data()[i].as_f64();
            max_err = max_err.max((a - numeric).abs() / (numeric.abs() + DENOM_FLOOR));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

fn scalar_of<T: Real>(tape: &Tape<T>, out: Var) -> TensorResult<T> {
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::Contract(format!(
            "grad_check function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
