/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient returned by `f` at `x` against central
/// differences on every coordinate and returns the largest relative error.
pub fn grad_check<F>(mut f: F, x: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        probe[k] = x[k] + epsilon;
        let (plus, _) = f(&probe);
        probe[k] = x[k] - epsilon;
        let (minus, _) = f(&probe);
        probe[k] = x[k];
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(numeric, analytic[k]));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = [0.3, -1.7, 2.4, 0.01];
        let f = |v: &[f64]| (0.5 * v.iter().map(|a| a * a).sum::<f64>(), v.to_vec());
        assert!(grad_check(f, &x, 1e-5) < 1e-8);
    }

    #[test]
    fn detects_corrupted_gradient() {
        let x = [0.3, -1.7, 2.4];
        let f = |v: &[f64]| {
            let mut g = v.to_vec();
            g[1] += 0.1;
            (0.5 * v.iter().map(|a| a * a).sum::<f64>(), g)
        };
        assert!(grad_check(f, &x, 1e-5) > 1e-2);
    }
}
