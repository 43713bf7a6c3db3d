//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Number of scalar coordinates that were perturbed.
    pub coordinates: usize,
    /// `|f|` at the unperturbed inputs.
    pub value_scale: f64,
    /// Largest `|analytic - numeric|` divided by the larger of the tolerance
    /// band `tol · denominator` and the rounding floor
    /// `ROUNDOFF_ULPS · ε · |f| / eps` of the difference quotient; at most 1
    /// when every coordinate agrees up to tolerance or to rounding of `f`.
    pub max_floor_ratio: f64,
}

/// Units of `f64::EPSILON · |f|` allowed for rounding of each evaluation of `f`.
pub const ROUNDOFF_ULPS: f64 = 4.0;

/// Absolute error a central difference can carry from rounding `f` alone.
pub fn roundoff_floor(value_scale: f64, eps: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * value_scale / eps
}

impl GradCheckReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            Err(Error::GradCheck {
                op: self.op_name,
                max_rel_error: self.max_rel_error,
                tolerance: self.tolerance,
            })
        }
    }
}

/// Relative error with the floor used throughout the gradient suite.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)` on every coordinate of
/// every input.
pub fn grad_check<F>(
    op_name: &str,
    f: F,
    inputs: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::usage(format!("grad_check eps must be positive, got {eps}")));
    }

    let mut graph = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| graph.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&mut graph, &vars)?;
    let value_scale = graph.value(root).data()[0].abs();
    let floor = roundoff_floor(value_scale, eps);
    let grads = graph.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = probe
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut probe = inputs.to_vec();
    let mut max_rel_error: f64 = 0.0;
    let mut max_floor_ratio: f64 = 0.0;
    let mut coordinates = 0;
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let original = inputs[i].data()[j];
            probe[i].data_mut()[j] = original + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = original - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grad.data()[j];
            max_rel_error = max_rel_error.max(relative_error(analytic, numeric));
            let band = tol * analytic.abs().max(numeric.abs()).max(1e-8);
            max_floor_ratio = max_floor_ratio.max((analytic - numeric).abs() / band.max(floor));
            coordinates += 1;
        }
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error <= tol,
        coordinates,
        value_scale,
        max_floor_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_at_zero() {
        let report = grad_check(
            "sigmoid",
            |g, v| {
                let s = g.sigmoid(v[0])?;
                g.sum(s)
            },
            &[Tensor::zeros(&[1])],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn sum_of_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(&[3, 3], 1.0, &mut rng);
        let b = Tensor::uniform(&[3, 3], 1.0, &mut rng);
        let report = grad_check(
            "matmul",
            |g, v| {
                let p = g.matmul(v[0], v[1])?;
                g.sum(p)
            },
            &[a, b],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.coordinates, 18);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at an exact kink: analytic 0 from one side, numeric 0.5.
        let report = grad_check(
            "relu-kink",
            |g, v| {
                let r = g.relu(v[0])?;
                g.sum(r)
            },
            &[Tensor::zeros(&[1])],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.into_result().is_err());
    }

    #[test]
    fn rejects_non_positive_eps() {
        let r = grad_check("x", |g, v| g.sum(v[0]), &[Tensor::zeros(&[1])], 0.0, 1e-6);
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
