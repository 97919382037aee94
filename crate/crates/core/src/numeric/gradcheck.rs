//! Finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numeric::params::{ParamGrads, ParamSet};
use crate::numeric::tape::{Tape, Var};
use crate::numeric::tensor::Tensor;

fn check_step(step: f64) -> Result<()> {
    if !(1e-8..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-8, 1e-3]"
        )));
    }
    Ok(())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1.0, f64::max(analytic.abs(), numeric.abs()))
}

/// Compare the taped gradient of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// Returns the max over coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_step(step)?;

    let mut tape = Tape::new(true);
    let var = tape.input_grad(x);
    let out = f(&mut tape, var)?;
    let value = tape.scalar_value(out);
    if !value.is_finite() {
        return Err(Error::NonFinite("gradient_check function output".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<f64> =
        tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: &Tensor| -> Result<f64> {
        let mut t = Tape::new(false);
        let v = t.leaf_tensor(data);
        let out = f(&mut t, v)?;
        let y = t.scalar_value(out);
        if !y.is_finite() {
            return Err(Error::NonFinite("gradient_check function output".into()));
        }
        Ok(y)
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        max_err = max_err.max(rel_err(analytic[i], numeric));
    }
    Ok(max_err)
}

/// Finite-difference check of precomputed analytic gradients for every
/// coordinate of every parameter in a [`ParamSet`]. The loss closure is
/// re-evaluated on perturbed copies of the parameters; it must be
/// deterministic.
pub fn param_gradient_check<F>(
    params: &ParamSet,
    analytic: &ParamGrads,
    loss: F,
    step: f64,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    check_step(step)?;
    assert_eq!(params.len(), analytic.len());

    let mut probe = params.clone();
    let mut max_err: f64 = 0.0;
    for (id, entry) in params.iter() {
        for i in 0..entry.data.len() {
            let orig = entry.data[i];
            probe.values_mut(id)[i] = orig + step;
            let plus = loss(&probe)?;
            probe.values_mut(id)[i] = orig - step;
            let minus = loss(&probe)?;
            probe.values_mut(id)[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("param_gradient_check loss".into()));
            }
            let numeric = (plus - minus) / (2.0 * step);
            max_err = max_err.max(rel_err(analytic[id][i], numeric));
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // f = sum(x): analytic and numeric agree to machine precision.
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.2, 0.0]);
        let err = gradient_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let err = gradient_check(
            |t, _v| {
                let c = t.leaf(1, 1, vec![5.0]);
                Ok(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn step_outside_range_is_rejected()  {
        let x = Tensor::new(vec![1], vec![1.0]);
        assert!(gradient_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
        assert!(gradient_check(|t, v| Ok(t.sum(v)), &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::new(vec![1], vec![-1.0]);
        // ln of a negative number -> NaN.
        let r = gradient_check(
            |t, v| {
                let l = t.ln(v);
                Ok(t.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_cross_entropy_matches_finite_differences() {
        let x = Tensor::new(vec![1, 5], vec![0.2, -0.4, 1.1, 0.0, -2.3]);
        let err = gradient_check(
            |t, v| {
                let lsm = t.log_softmax_rows(v, None)?;
                let picked = t.gather(lsm, &[(0, 2)]);
                let s = t.sum(picked);
                Ok(t.scale(s, -1.0))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
