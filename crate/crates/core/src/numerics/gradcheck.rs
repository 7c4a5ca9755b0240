use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` at `input` against the
/// fourth-order central difference
/// `(f(x - 2h) - 8 f(x - h) + 8 f(x + h) - f(x + 2h)) / (12 h)` per coordinate.
///
/// `f` returns `(value, gradient)`; only the value is used at perturbed points.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, step: f64) -> GradCheck
where
    F: Fn(&Tensor<f64>) -> (f64, Tensor<f64>),
{
    let (_, analytic) = f(input);
    assert_eq!(analytic.shape(), input.shape(), "gradient shape must match input");
    let mut x = input.clone();
    let mut numeric = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = x.data()[i];
        let mut at = |offset: f64| {
            x.data_mut()[i] = orig + offset;
            f(&x).0
        };
        let (m2, m1, p1, p2) = (at(-2.0 * step), at(-step), at(step), at(2.0 * step));
        x.data_mut()[i] = orig;
        numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }
    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheck {
        max_rel_error,
        worst_index,
        analytic: analytic.into_data(),
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let report = grad_check(|x| (x.dot(x), x.map(|v| 2.0 * v)), &x, 1e-5);
        assert_eq!(report.analytic, vec![2.0, 4.0]);
        assert!(report.max_rel_error <= 1e-9, "{}", report.max_rel_error);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_vec(vec![0.3, -4.0, 9.0]);
        let report = grad_check(|x| (7.0, x.zeros_like()), &x, 1e-5);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn quartic_is_exact_at_a_coarse_step() {
        let x = Tensor::from_vec(vec![0.7, -1.3]);
        let f = |x: &Tensor<f64>| {
            let v: f64 = x.data().iter().map(|a| a.powi(4)).sum();
            (v, x.map(|a| 4.0 * a.powi(3)))
        };
        assert!(grad_check(f, &x, 1e-2).max_rel_error <= 1e-10);
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let report = grad_check(|x| (x.dot(x), x.map(|v| 4.0 * v)), &x, 1e-5);
        assert!((report.max_rel_error - 0.5).abs() < 1e-6);
        assert!(report.max_rel_error > 1e-5);
    }
}
