//! Central finite-difference gradient checks in 64-bit precision.

use super::{Result, Tape, Tensor, TensorError, Var};

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(TensorError::contract("grad_check", format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn eval_scalar<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::contract("grad_check", "function is not scalar-valued"));
    }
    Ok(v.item())
}

/// Per-coordinate relative errors between the tape gradient of `f` and central
/// differences, for every input tensor. `stride` subsamples coordinates
/// (every `stride`-th flat index, starting at 0).
pub fn central_difference_errors<F>(f: F, xs: &[Tensor<f64>], eps: f64, stride: usize) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let stride = stride.max(1);
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(xs.len());
    let mut probe = xs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(xs[ti].shape().to_vec()));
        let mut errs = Vec::new();
        for i in (0..xs[ti].len()).step_by(stride) {
            let orig = xs[ti].data()[i];
            probe[ti].data_mut()[i] = orig + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[i] = orig - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            errs.push(relative_error(analytic.data()[i], numeric));
        }
        errors.push(errs);
    }
    Ok(errors)
}

/// Max relative error of the analytic gradient of scalar `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps, 1)
}

/// Max relative error over all (strided) coordinates of all inputs.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64, stride: usize) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let errors = central_difference_errors(f, xs, eps, stride)?;
    Ok(errors.iter().flatten().copied().fold(0.0, f64::max))
}
