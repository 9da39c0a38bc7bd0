use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(1, |a|, |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares `analytic` against central differences of `f` around `params`,
/// one coordinate at a time, and reports the worst relative error.
pub fn check_gradient<F>(
    mut f: F,
    params: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
) -> Result<GradCheck>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if params.shape() != analytic.shape() {
        return Err(Error::shape("check_gradient", params.shape(), analytic.shape()));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.data().first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    for i in 0..params.len() {
        let x0 = params.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = f(&probe);
        probe.data_mut()[i] = x0 - h;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!("objective is not finite at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let err = rel_error(a, numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let w = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = Tensor::new(vec![1], vec![6.0]).unwrap();
        let r = check_gradient(|p| p.data()[0] * p.data()[0], &w, &g, DEFAULT_STEP).unwrap();
        assert!((r.numeric - 6.0).abs() < 1e-6);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn detects_wrong_gradient() {
        let w = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![2.0, 0.0]).unwrap();
        let r = check_gradient(|p| p.data().iter().map(|v| v * v).sum(), &w, &g, 1e-3).unwrap();
        assert_eq!(r.worst_index, 1);
        assert!(r.max_rel_error > 0.9);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let w = Tensor::new(vec![1], vec![0.0]).unwrap();
        let g = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = check_gradient(|p| 1.0 / (p.data()[0] - 1e-3), &w, &g, 1e-3);
        assert!(matches!(r, Err(Error::Oracle(_))));
    }
}
