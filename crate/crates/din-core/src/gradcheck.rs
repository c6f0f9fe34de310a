//! Central-difference gradient auditing.

/// Central-difference gradient of a scalar function, one coordinate group per
/// input tensor.
pub fn central_gradient<F>(f: F, point: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut work: Vec<Vec<f64>> = point.to_vec();
    for p in 0..point.len() {
        let mut g = vec![0.0; point[p].len()];
        for i in 0..point[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + eps;
            let plus = f(&work);
            work[p][i] = orig - eps;
            let minus = f(&work);
            work[p][i] = orig;
            g[i] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Max over all coordinates of `|analytic - central| / (|central| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &[Vec<f64>], analytic: &[Vec<f64>], eps: f64) -> f64
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let numeric = central_gradient(f, point, eps);
    let mut worst = 0.0f64;
    for (a_grp, n_grp) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a_grp.iter().zip(n_grp) {
            let err = (a - n).abs() / (n.abs() + 1e-8);
            worst = worst.max(err);
        }
    }
    worst
}
