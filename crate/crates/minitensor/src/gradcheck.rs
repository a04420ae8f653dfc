//! Finite-difference gradient checking.

use crate::tensor::{Tensor, TensorError};

/// Compare the analytic gradient of a scalar-valued function against central
/// finite differences, in double precision.
///
/// `f` is re-run for every perturbed coordinate, so it must be deterministic
/// (dropout disabled or its mask frozen). Returns the maximum over all
/// coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f(params)?;
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_err = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        for i in 0..n {
            let orig = p.value()[i];
            p.update_value(|v| v[i] = orig + eps);
            let plus = f(params)?.item();
            p.update_value(|v| v[i] = orig - eps);
            let minus = f(params)?.item();
            p.update_value(|v| v[i] = orig);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if err > max_err {
                max_err = err;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        // f(x) = sum(x^2) at x = [1, 2] has gradient [2, 4]
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]);
        let f = |ps: &[Tensor<f64>]| -> Result<Tensor<f64>, TensorError> {
            Ok(ops::sum_all(&ops::mul(&ps[0], &ps[0])?))
        };
        let err = grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(err < 1e-7, "err {err}");
        // analytic values themselves
        ops::sum_all(&ops::mul(&x, &x).unwrap()).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn linear_function_error_is_machine_scale() {
        let x = Tensor::parameter(&[3], vec![0.4, -1.2, 2.5]);
        let f = |ps: &[Tensor<f64>]| -> Result<Tensor<f64>, TensorError> {
            Ok(ops::sum_all(&ops::scale(&ps[0], 3.0)))
        };
        let err = grad_check(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }
}
