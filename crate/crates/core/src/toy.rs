//! Scalar stochastic toy model of one AdamW-updated parameter:
//!
//! ```text
//! x_{t+1} = x_t - η A_t - η λ x_t,    A_t = h (x_t - x*) + ξ_t
//! ```
//!
//! with i.i.d. noise `ξ` of variance σ². The first two moments converge to
//!
//! ```text
//! x_∞  = h/(h+λ) · x*
//! x2_∞ = η σ² / ((λ+h)(2 - ηλ - ηh)) + x_∞²
//! ```
//!
//! and in the `ηλ ≪ 1`, `h ≪ λ` regime the second moment simplifies to
//! `(1/2)(η/λ)(σ² + 2(h x*)²/(ηλ))`, which fully separates the noise and
//! signal contributions. In the noise-dominated regime this is the origin of
//! the `‖W‖ ∝ √(η/λ)` parameter-norm scaling.

use crate::error::{CoreError, Result};
use crate::rng::{derive, normal_f64};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    /// Loss steepness around the optimum.
    pub h: f64,
    pub x_star: f64,
    /// Gradient-noise standard deviation.
    pub sigma: f64,
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryMoments {
    pub x_inf: f64,
    pub x2_inf: f64,
    /// The separated-form approximation, valid when the regime flags hold.
    pub x2_simplified: f64,
    /// `ηλ ≪ 1` (the formulas assume it).
    pub small_eta_lambda: bool,
    /// `h ≪ λ` (the simplified form additionally assumes it).
    pub small_h_over_lambda: bool,
}

/// Closed-form stationary moments.
pub fn toy_stationary_moments(spec: &ToyModelSpec) -> Result<StationaryMoments> {
    let ToyModelSpec { h, x_star, sigma, eta, lambda, .. } = *spec;
    let denom = (lambda + h) * (2.0 - eta * lambda - eta * h);
    if denom <= 0.0 {
        return Err(CoreError::contract(format!(
            "toy_stationary_moments: (λ+h)(2-ηλ-ηh) = {denom} must be positive"
        )));
    }
    let x_inf = h / (h + lambda) * x_star;
    let x2_inf = eta * sigma * sigma / denom + x_inf * x_inf;
    let x2_simplified =
        0.5 * (eta / lambda) * (sigma * sigma + 2.0 * (h * x_star) * (h * x_star) / (eta * lambda));
    Ok(StationaryMoments {
        x_inf,
        x2_inf,
        x2_simplified,
        small_eta_lambda: eta * lambda < 0.1,
        small_h_over_lambda: h < 0.1 * lambda,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub mean: f64,
    pub second_moment: f64,
    pub tail_len: usize,
    /// False when the run is too short relative to the relaxation time
    /// `1/(η(h+λ))` for the tail averages to be trustworthy.
    pub stationary: bool,
}

/// Simulate the recurrence and report averages over the stationary tail
/// (the second half of the run). Diverging trajectories (|x| > 1e12) error
/// out with the failing step.
pub fn toy_simulate(spec: &ToyModelSpec) -> Result<SimResult> {
    if spec.steps < 2 {
        return Err(CoreError::contract("toy_simulate: need at least 2 steps"));
    }
    let mut rng = derive(spec.seed, 0x544f59);
    let mut x = 0.0f64;
    let burn_in = spec.steps / 2;
    let mut sum = 0.0f64;
    let mut sum2 = 0.0f64;
    for t in 0..spec.steps {
        let noise = if spec.sigma > 0.0 { spec.sigma * normal_f64(&mut rng) } else { 0.0 };
        let a = spec.h * (x - spec.x_star) + noise;
        x = x - spec.eta * a - spec.eta * spec.lambda * x;
        if x.abs() > 1e12 {
            return Err(CoreError::Divergence {
                step: t,
                details: format!("|x| = {:.3e}", x.abs()),
            });
        }
        if t >= burn_in {
            sum += x;
            sum2 += x * x;
        }
    }
    let tail_len = spec.steps - burn_in;
    let relax = 1.0 / (spec.eta * (spec.h + spec.lambda)).max(1e-300);
    Ok(SimResult {
        mean: sum / tail_len as f64,
        second_moment: sum2 / tail_len as f64,
        tail_len,
        stationary: spec.steps as f64 >= 10.0 * relax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_h_lambda_halves_xstar() {
        let spec = ToyModelSpec {
            h: 0.05,
            x_star: 2.0,
            sigma: 0.0,
            eta: 1e-3,
            lambda: 0.05,
            steps: 100,
            seed: 0,
        };
        let m = toy_stationary_moments(&spec).unwrap();
        assert!((m.x_inf - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_zero_target_gives_zero_second_moment() {
        let spec = ToyModelSpec {
            h: 0.01,
            x_star: 0.0,
            sigma: 0.0,
            eta: 1e-3,
            lambda: 0.1,
            steps: 100,
            seed: 0,
        };
        let m = toy_stationary_moments(&spec).unwrap();
        assert_eq!(m.x2_inf, 0.0);
    }

    #[test]
    fn closed_form_value() {
        let spec = ToyModelSpec {
            h: 0.01,
            x_star: 0.0,
            sigma: 1.0,
            eta: 1e-3,
            lambda: 0.1,
            steps: 100,
            seed: 0,
        };
        let m = toy_stationary_moments(&spec).unwrap();
        let expect = 1e-3 / ((0.11) * (2.0 - 1e-4 - 1e-5));
        assert!((m.x2_inf - expect).abs() < 1e-18);
        assert!(m.small_eta_lambda && m.small_h_over_lambda);
    }

    #[test]
    fn invalid_denominator_rejected() {
        let spec = ToyModelSpec {
            h: 0.5,
            x_star: 0.0,
            sigma: 1.0,
            eta: 4.0,
            lambda: 0.5,
            steps: 100,
            seed: 0,
        };
        assert!(toy_stationary_moments(&spec).is_err());
    }

    #[test]
    fn noiseless_decay_is_geometric() {
        // σ = 0, x* = 0: x_t decays geometrically toward 0 from any start.
        let (eta, h, lambda) = (1e-2, 0.05, 0.1);
        let rate = 1.0 - eta * h - eta * lambda;
        let mut x = 3.0f64;
        for _ in 0..50 {
            let next = x - eta * (h * x) - eta * lambda * x;
            assert!((next - rate * x).abs() < 1e-15);
            assert!(next.abs() < x.abs());
            x = next;
        }
    }

    #[test]
    fn divergence_reports_step() {
        let spec = ToyModelSpec {
            h: 0.0,
            x_star: 0.0,
            sigma: 1e11,
            eta: 1e3,
            lambda: 1.0,
            steps: 10_000,
            seed: 3,
        };
        match toy_simulate(&spec) {
            Err(CoreError::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
