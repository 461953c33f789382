/// Central-difference gradient audit.
///
/// For each coordinate i, the numeric gradient is
/// (f(x + h e_i) - f(x - h e_i)) / 2h, and the reported figure is
/// max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|).
/// The closure must be a pure function of its argument; it is called twice
/// per coordinate on a perturbed copy of `params`.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length does not match parameters");
    assert!(h > 0.0, "step must be positive");
    let mut scratch = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let saved = scratch[i];
        scratch[i] = saved + h;
        let up = f(&scratch);
        scratch[i] = saved - h;
        let down = f(&scratch);
        scratch[i] = saved;
        let numeric = (up - down) / (2.0 * h);
        let denom = 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_accepted() {
        let params = vec![0.3, -1.2, 2.5];
        let analytic: Vec<f64> = params.iter().map(|x| 2.0 * x).collect();
        let err = finite_diff_check(|p| p.iter().map(|x| x * x).sum(), &params, &analytic, 1e-5);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let params = vec![0.3, -1.2, 2.5];
        let broken: Vec<f64> = params.iter().map(|x| 3.0 * x).collect();
        let err = finite_diff_check(|p| p.iter().map(|x| x * x).sum(), &params, &broken, 1e-5);
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn nonsmooth_corner_reports_large_error() {
        // A kink just inside the probe window distorts the central
        // difference; a claimed gradient of 1 should not pass there.
        let err = finite_diff_check(|p| p[0].abs(), &[1e-6], &[1.0], 1e-5);
        assert!(err > 0.5, "{err}");
    }
}
