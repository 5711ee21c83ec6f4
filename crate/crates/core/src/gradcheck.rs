//! Central finite differences, used as the independent oracle for every
//! analytic backward pass.
//!
//! Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`. The floor keeps
//! gradients that are analytically zero (e.g. a conv bias feeding batch
//! norm) from dividing round-off noise by ~0.

use std::fmt;

use crate::rng::Rng;
use crate::tensor::Tensor;

pub const FD_EPSILON: f64 = 1e-6;
pub const REL_FLOOR: f64 = 1e-3;
/// Per-layer tolerance.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Whole-model tolerance.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl fmt::Display for GradCheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}[{}]: analytic {:.10e} vs numeric {:.10e} (rel {:.3e})",
            self.name, self.index, self.analytic, self.numeric, self.rel_error
        )
    }
}

impl std::error::Error for GradCheckFailure {}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to every element of `base`.
pub fn numeric_gradient(base: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = base.clone();
    let mut grad = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let orig = base.data()[i];
        probe.data_mut()[i] = orig + FD_EPSILON;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - FD_EPSILON;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * FD_EPSILON);
    }
    grad
}

/// Compares `analytic` against central differences of `f` at `base`;
/// returns the largest relative error seen.
pub fn check_gradient_with(
    name: &str,
    tolerance: f64,
    base: &Tensor,
    analytic: &Tensor,
    f: impl FnMut(&Tensor) -> f64,
) -> Result<f64, GradCheckFailure> {
    assert_eq!(base.shape(), analytic.shape(), "{name}: gradient shape");
    let numeric = numeric_gradient(base, f);
    let mut worst = 0.0f64;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = relative_error(a, n);
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
        if !(rel <= tolerance) {
            return Err(GradCheckFailure {
                name: name.to_string(),
                index: i,
                analytic: a,
                numeric: n,
                rel_error: rel,
            });
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub fn check_gradient(
    name: &str,
    base: &Tensor,
    analytic: &Tensor,
    f: impl FnMut(&Tensor) -> f64,
) -> Result<f64, GradCheckFailure> {
    check_gradient_with(name, LAYER_TOLERANCE, base, analytic, f)
}

/// I.i.d. uniform on [-scale, scale).
pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-scale, scale)).collect())
        .expect("random_tensor: invalid shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact_enough() {
        let base = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let analytic = base.map(|v| 2.0 * v);
        let worst = check_gradient("q", &base, &analytic, |p| p.data().iter().map(|v| v * v).sum())
            .unwrap();
        assert!(worst < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let base = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let wrong = Tensor::new(&[2], vec![2.0, 3.0]).unwrap();
        let err = check_gradient("q", &base, &wrong, |p| p.data().iter().map(|v| v * v).sum())
            .unwrap_err();
        assert_eq!(err.index, 1);
    }
}
