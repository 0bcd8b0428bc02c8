//! Central-difference verification of tape gradients.

use super::{Matrix, Tape, TensorError, Var};
use crate::scalar::Scalar;

type Result<T> = std::result::Result<T, TensorError>;

/// Outcome of comparing tape gradients with central differences.
///
/// The error for one element is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
/// where `floor = 1e-3 · max |analytic|` over all checked elements, so
/// elements whose gradient is negligible next to the largest one are judged
/// on the gradient's overall scale rather than their own.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(param index, element index)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
}

/// A scalar-valued composition that can be recorded at any precision.
pub trait ScalarFunction {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var>;
}

fn analytic<T: Scalar>(
    params: &[Matrix<T>],
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<Matrix<f64>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_finite() {
        return Err(TensorError::NonFinite("grad_check loss"));
    }
    tape.backward(loss)?;
    let grads: Vec<Matrix<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v).cast()).collect();
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite("grad_check gradient"));
    }
    Ok(grads)
}

fn eval_at<T: Scalar>(params: &[Matrix<T>], f: &impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss).get(0, 0).as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite("grad_check loss"))
    }
}

fn numeric<T: Scalar>(
    params: &[Matrix<T>],
    step: f64,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<Matrix<f64>>> {
    let mut work: Vec<Matrix<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (r, c) = params[p].shape();
        let mut g = Matrix::zeros(r, c);
        for k in 0..params[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + T::of(step);
            let plus = eval_at(&work, &f)?;
            work[p].data_mut()[k] = orig - T::of(step);
            let minus = eval_at(&work, &f)?;
            work[p].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

fn compare(analytic: &[Matrix<f64>], numeric: &[Matrix<f64>]) -> GradCheckReport {
    let scale = analytic.iter().flat_map(|m| m.data().iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, worst: None };
    for (p, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (k, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((p, k));
            }
        }
    }
    report
}

/// Compares tape gradients of `f` at `params` with central differences of
/// width `step`, both evaluated at precision `T`.
pub fn grad_check<T, F>(f: F, params: &[Matrix<T>], step: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let a = analytic(params, &f)?;
    let n = numeric(params, step.as_f64(), &f)?;
    Ok(compare(&a, &n))
}

/// Tape gradients at precision `A` against central differences evaluated at
/// precision `R` on the same parameter values. With `A = f32, R = f64` this
/// measures the single-precision gradient against the exact derivative
/// without drowning it in single-precision cancellation noise.
pub fn grad_check_reference<A, R, F>(f: &F, params: &[Matrix<A>], step: f64) -> Result<GradCheckReport>
where
    A: Scalar,
    R: Scalar,
    F: ScalarFunction,
{
    let a = analytic(params, |t: &mut Tape<A>, v: &[Var]| f.eval(t, v))?;
    let ref_params: Vec<Matrix<R>> = params.iter().map(Matrix::cast).collect();
    let n = numeric(&ref_params, step, |t: &mut Tape<R>, v: &[Var]| f.eval(t, v))?;
    Ok(compare(&a, &n))
}
