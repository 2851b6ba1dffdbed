//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub passed: bool,
    /// max over entries of `|analytic − numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
}

/// Compares an arbitrary analytic gradient against central differences of
/// `value` around `x`.
pub fn grad_check_with(
    value: impl Fn(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    step: f64,
    tol: f64,
) -> Result<GradCheck> {
    if step <= 0.0 {
        return Err(Error::Contract(format!(
            "step must be positive, got {step}"
        )));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::shape(
            "grad_check",
            format!("gradient {:?} for input {:?}", analytic.shape(), x.shape()),
        ));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if !rel.is_finite() {
            worst = f64::INFINITY;
        } else {
            worst = worst.max(rel);
        }
    }
    Ok(GradCheck {
        passed: worst <= tol,
        max_rel_error: worst,
    })
}

/// Checks the graph-computed gradient of a scalar function `f` at `x`.
///
/// `f` receives a fresh graph and the node holding `x` and must return a
/// rank-0 node.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |input: &Tensor<f64>| -> Result<(Graph<f64>, Var, Var)> {
        let mut g = Graph::new();
        let xv = g.param(input.clone());
        let out = f(&mut g, xv)?;
        if g.value(out).rank() != 0 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                g.value(out).shape()
            )));
        }
        Ok((g, xv, out))
    };
    let (g, xv, out) = eval(x)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    grad_check_with(
        |p| {
            let (g, _, out) = eval(p)?;
            g.value(out).item()
        },
        &analytic,
        x,
        step,
        tol,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let sq = g.square(x);
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        // d/dx sum(x²) = 2x; report 4x instead.
        let wrong = x.map(|v| 4.0 * v);
        let r = grad_check_with(
            |p| Ok(p.data().iter().map(|v| v * v).sum()),
            &wrong,
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.exp(x)), &x, 1e-5, 1e-4);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
