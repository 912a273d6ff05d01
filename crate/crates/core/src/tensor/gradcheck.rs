use thiserror::Error;

use super::{Scalar, Tape, Tensor, TensorError, Var};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// A scalar-valued function of several tensors that can be recorded on a tape
/// at any precision.
pub trait ScalarFunction {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var, TensorError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub location: (usize, usize),
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite value at parameter {param}, coordinate {coord}")]
    NonFinite { param: usize, coord: usize },
}

fn eval_f64<F: ScalarFunction>(f: &F, params: &[Tensor<f64>]) -> Result<f64, TensorError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients computed at precision `T` against central
/// differences evaluated in `f64`. Returns the largest relative error
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<T: Scalar, F: ScalarFunction>(
    f: &F,
    params: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport, GradCheckError> {
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.cast())).collect();
    let out = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        location: (0, 0),
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*var) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; params[pi].numel()],
        };
        for c in 0..params[pi].numel() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + eps;
            let plus = eval_f64(f, &work)?;
            work[pi].data_mut()[c] = orig - eps;
            let minus = eval_f64(f, &work)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[c];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(GradCheckError::NonFinite {
                    param: pi,
                    coord: c,
                });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    location: (pi, c),
                };
            }
        }
    }
    Ok(report)
}
