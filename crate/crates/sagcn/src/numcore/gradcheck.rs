//! Central finite-difference utilities used by gradient tests.
//!
//! The numeric side must stay independent of the tape: it only evaluates a
//! black-box scalar function at perturbed inputs.

use crate::Result;

/// Central finite differences: g[i] = (f(x + h·e_i) − f(x − h·e_i)) / 2h.
pub fn central_diff<F>(f: &mut F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest relative error between analytic and numeric gradients over the
/// elements whose magnitude clears `floor` (tiny gradients drown in
/// finite-difference truncation noise and are compared absolutely instead).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() <= floor && n.abs() <= floor {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(x) = sum(x_i^2), df/dx_i = 2 x_i
        let x = vec![1.0, -2.0, 0.5];
        let g = central_diff(&mut |v: &[f64]| Ok(v.iter().map(|x| x * x).sum()), &x, 1e-5).unwrap();
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_err_ignores_values_below_floor() {
        assert_eq!(max_rel_err(&[0.0, 1.0], &[1e-12, 1.0], 1e-8), 0.0);
        assert!(max_rel_err(&[1.0], &[1.1], 1e-8) > 0.09);
    }
}
