//! Central finite differences — the independent oracle behind every gradient
//! check in the crate. Deliberately kept free of any tape machinery.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function: per coordinate,
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// Errors if `f` returns a non-finite value at any probe, naming the
/// coordinate.
pub fn finite_difference_gradient<S: Scalar>(
    f: &mut dyn FnMut(&Tensor<S>) -> Result<f64>,
    x: &Tensor<S>,
    step: f64,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + S::from_f64(step);
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - S::from_f64(step);
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(CoreError::NonFinite {
                op: "finite_difference_gradient".into(),
                details: format!("probe at coordinate {i}: f(+h)={fp}, f(-h)={fm}"),
            });
        }
        out.push((fp - fm) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Largest per-coordinate relative error between two gradients.
/// Coordinates where both magnitudes fall below `floor` are compared
/// absolutely against `floor`.
pub fn max_rel_err(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / a.abs().max(r.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        // f = x², x = 3, h = 1e-6: derivative 6 within 1e-8.
        let x = Tensor::<f64>::scalar(3.0);
        let g = finite_difference_gradient(&mut |t| Ok(t.item() * t.item()), &x, 1e-6).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_gives_zero_vector() {
        let x = Tensor::<f64>::full(&[5], 1.3);
        let g = finite_difference_gradient(&mut |_| Ok(42.0), &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let x = Tensor::<f64>::full(&[3], 0.5);
        let err = finite_difference_gradient(
            &mut |t| {
                let v = t.data()[2];
                Ok(if v > 0.5 { f64::NAN } else { v })
            },
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 2"), "{err}");
    }
}
