//! Central finite differences: the reference every hand-written backward
//! function is checked against.

use super::Tensor;
use crate::error::{Error, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    finite_diff_coords(f, x, h, 0..x.len()).map(|g| {
        Tensor::from_parts(x.shape().to_vec(), g)
    })
}

/// Central differences restricted to the listed flat coordinates. Returns one
/// value per coordinate, in order.
pub fn finite_diff_coords(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    coords: impl IntoIterator<Item = usize>,
) -> Result<Vec<f64>> {
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::new();
    for i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {i}: {plus}, {minus}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum_sq()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert_eq!(g, Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| Ok(1.0 / (t.data()[0] - 1e-5)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
