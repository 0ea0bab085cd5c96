//! Central finite-difference gradient oracle.
//!
//! Only evaluates the scalar function; never touches the tape's adjoints.

/// Central differences of `f` with respect to every coordinate of `x`.
pub fn numerical_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`, elementwise maximum.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = numerical_gradient(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!(max_relative_error(&g, &[2.0, 3.0], 1e-8) < 1e-8);
    }
}
