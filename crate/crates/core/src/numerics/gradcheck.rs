//! Central finite differences, used to verify analytic gradients.

use crate::error::{DvrError, Result};

/// Denominator floor in [`relative_error`].
///
/// Below this magnitude the comparison is effectively absolute. Central
/// differences at step 1e-5 carry roughly 1e-10 of round-off for losses of
/// order one, so a smaller floor would flag vanishing gradients spuriously.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(DvrError::invalid("finite_diff_grad: step must be > 0"));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = loss_fn(&p);
        p[i] = orig - step;
        let minus = loss_fn(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DvrError::EvaluationFailure { index: i });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest element-wise [`relative_error`] and the index where it occurs.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn sum_has_unit_gradient() {
        let p = [0.3, -1.7, 12.0, 4.4];
        let g = finite_diff_grad(|p| p.iter().sum(), &p, 1e-5).unwrap();
        for gi in g {
            assert!((gi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_loss_names_coordinate() {
        let err = finite_diff_grad(
            |p| if p[1] > 1.0 { f64::NAN } else { p[0] },
            &[0.0, 1.0],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, DvrError::EvaluationFailure { index: 1 }));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_diff_grad(|p| p[0], &[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn quadratics_are_exact(
            a in prop::collection::vec(-3.0f64..3.0, 3),
            b in prop::collection::vec(-3.0f64..3.0, 3),
            p in prop::collection::vec(-5.0f64..5.0, 3),
            c in -2.0f64..2.0,
        ) {
            // f(p) = Σ a_i p_i² + b_i p_i + c + p_0 p_1
            let f = |p: &[f64]| {
                (0..3).map(|i| a[i] * p[i] * p[i] + b[i] * p[i]).sum::<f64>() + c + p[0] * p[1]
            };
            let analytic: Vec<f64> = (0..3)
                .map(|i| {
                    2.0 * a[i] * p[i] + b[i]
                        + match i { 0 => p[1], 1 => p[0], _ => 0.0 }
                })
                .collect();
            let numeric = finite_diff_grad(f, &p, 1e-5).unwrap();
            for (an, nu) in analytic.iter().zip(&numeric) {
                let rel = (an - nu).abs() / an.abs().max(1.0);
                prop_assert!(rel < 1e-8, "analytic {an} numeric {nu}");
            }
        }
    }
}
