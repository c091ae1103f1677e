use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative discrepancy between the reverse-mode gradient of the
/// scalar function `f` at `x` and its central difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let analytic = {
        let g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let loss = f(&g, v)?;
        let grads = g.backward(loss)?;
        grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()))
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(probe);
        let out = f(&g, v)?;
        let value = out.value();
        if value.len() != 1 {
            return Err(Error::dim("grad_check", "function must return a scalar"));
        }
        Ok(value.item())
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn([6], |i| i as f64 - 2.0);
        let err = grad_check(|_, v| Ok(v.scale(3.5).sum()), &x, 1e-4).unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient_scale() {
        // relu at exactly zero: one-sided kink gives an O(1) discrepancy.
        let x = Tensor::from_fn([3], |_| 0.0);
        let err = grad_check(|_, v| Ok(v.relu().sum()), &x, 1e-4).unwrap();
        assert!(err > 0.1);
    }
}
