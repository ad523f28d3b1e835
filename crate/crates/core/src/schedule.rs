//! Learning-rate / weight-decay / batch schedules, and the effective
//! learning rate (ELR) and effective weight decay (EWD) coordinates.
//!
//! ELR `√(ηλ)` governs the training noise level; EWD `√(λ/η)` governs the
//! stationary parameter norms. On a log-scale `(η, λ)` grid the two move in
//! orthogonal directions.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// `(ELR, EWD) = (√(ηλ), √(λ/η))`.
pub fn elr_ewd(eta: f64, lambda: f64) -> Result<(f64, f64)> {
    if eta <= 0.0 || lambda <= 0.0 {
        return Err(CoreError::contract(format!(
            "elr_ewd: eta and lambda must be positive, got ({eta}, {lambda})"
        )));
    }
    Ok(((eta * lambda).sqrt(), (lambda / eta).sqrt()))
}

/// Inverse map: `η = η_eff / λ_eff`, `λ = η_eff λ_eff`.
pub fn elr_ewd_inverse(eta_eff: f64, lambda_eff: f64) -> (f64, f64) {
    (eta_eff / lambda_eff, eta_eff * lambda_eff)
}

/// Gradients of (ELR, EWD) in `(log η, log λ)` coordinates:
/// `∇ η_eff = (η_eff/2, η_eff/2)`, `∇ λ_eff = (-λ_eff/2, λ_eff/2)`.
pub fn elr_ewd_log_gradients(eta: f64, lambda: f64) -> ([f64; 2], [f64; 2]) {
    let (e, w) = ((eta * lambda).sqrt(), (lambda / eta).sqrt());
    ([e / 2.0, e / 2.0], [-w / 2.0, w / 2.0])
}

/// Dot product of the two log-scale gradients; identically zero.
pub fn elr_ewd_log_orthogonality(eta: f64, lambda: f64) -> f64 {
    let (ge, gw) = elr_ewd_log_gradients(eta, lambda);
    ge[0] * gw[0] + ge[1] * gw[1]
}

/// Square-root batch scaling for Adam: `η(b) = η_ref √(b/b_ref)`.
pub fn batch_scaled_lr(eta_ref: f64, b_ref: f64, b: f64) -> Result<f64> {
    if b_ref <= 0.0 || b <= 0.0 {
        return Err(CoreError::contract("batch_scaled_lr: batch sizes must be positive"));
    }
    Ok(eta_ref * (b / b_ref).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampupSpec {
    pub b_start: f64,
    pub b_end: f64,
    pub duration_tokens: f64,
    /// Scale η by √(b/b_end) while the batch ramps.
    pub batch_scaling: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySpec {
    /// Exponential decay from the current value down to `current / factor`.
    pub factor: f64,
    pub duration_tokens: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PowerMode {
    None,
    /// η(t) = η0 √(min(1, t0/t)), λ constant. EWD then grows as t^{1/4}.
    Ps { t0: f64 },
    /// η and λ both scale as min(1, t0/t)^{1/4}: ELR decays as t^{-1/4}
    /// while EWD — and with it the stationary parameter norms — stays
    /// constant.
    Eps { t0: f64 },
}

/// Warmup / rampup / stable / decay schedule with optional power-mode
/// scaling of the stable stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub eta0: f64,
    pub lambda0: f64,
    pub warmup_tokens: f64,
    pub rampup: RampupSpec,
    /// Absolute token count at which the decay phase begins.
    pub stable_tokens: f64,
    pub decay: DecaySpec,
    pub power: PowerMode,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_tokens < 0.0
            || self.rampup.duration_tokens < 0.0
            || self.stable_tokens < 0.0
            || self.decay.duration_tokens < 0.0
        {
            return Err(CoreError::Config("schedule durations must be >= 0".into()));
        }
        if self.decay.factor <= 1.0 {
            return Err(CoreError::Config("decay factor must be > 1".into()));
        }
        if self.rampup.b_start <= 0.0 || self.rampup.b_end <= 0.0 {
            return Err(CoreError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulePoint {
    pub eta: f64,
    pub lambda: f64,
    pub batch_tokens: f64,
    pub eta_eff: f64,
    pub lambda_eff: f64,
}

/// Evaluate `(η, λ, b)` at a token count. η and b are continuous at every
/// phase boundary; the decay start may only kink the derivative.
pub fn schedule_at(tokens: f64, spec: &ScheduleSpec) -> Result<SchedulePoint> {
    spec.validate()?;
    if tokens < 0.0 {
        return Err(CoreError::contract("schedule_at: tokens_seen must be >= 0"));
    }
    let warmup = if spec.warmup_tokens > 0.0 { (tokens / spec.warmup_tokens).min(1.0) } else { 1.0 };

    let batch = if spec.rampup.duration_tokens > 0.0 && tokens < spec.rampup.duration_tokens {
        spec.rampup.b_start
            + (spec.rampup.b_end - spec.rampup.b_start) * tokens / spec.rampup.duration_tokens
    } else {
        spec.rampup.b_end
    };
    let batch_factor =
        if spec.rampup.batch_scaling { (batch / spec.rampup.b_end).sqrt() } else { 1.0 };

    let (power_eta, power_lambda) = match spec.power {
        PowerMode::None => (1.0, 1.0),
        PowerMode::Ps { t0 } => {
            let r = if tokens > 0.0 { (t0 / tokens).min(1.0) } else { 1.0 };
            (r.sqrt(), 1.0)
        }
        PowerMode::Eps { t0 } => {
            let r = if tokens > 0.0 { (t0 / tokens).min(1.0) } else { 1.0 };
            let f = r.powf(0.25);
            (f, f)
        }
    };

    let decay_factor = if tokens <= spec.stable_tokens {
        1.0
    } else if spec.decay.duration_tokens > 0.0 {
        let frac = ((tokens - spec.stable_tokens) / spec.decay.duration_tokens).min(1.0);
        spec.decay.factor.powf(-frac)
    } else {
        1.0 / spec.decay.factor
    };

    let eta = spec.eta0 * warmup * batch_factor * power_eta * decay_factor;
    let lambda = spec.lambda0 * power_lambda;
    let (eta_eff, lambda_eff) = if eta > 0.0 && lambda > 0.0 {
        elr_ewd(eta, lambda)?
    } else {
        (0.0, 0.0)
    };
    Ok(SchedulePoint { eta, lambda, batch_tokens: batch, eta_eff, lambda_eff })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_spec() -> ScheduleSpec {
        ScheduleSpec {
            eta0: 1e-3,
            lambda0: 0.1,
            warmup_tokens: 0.0,
            rampup: RampupSpec { b_start: 1024.0, b_end: 1024.0, duration_tokens: 0.0, batch_scaling: false },
            stable_tokens: f64::INFINITY,
            decay: DecaySpec { factor: 8.0, duration_tokens: 1e6 },
            power: PowerMode::None,
        }
    }

    #[test]
    fn elr_ewd_examples() {
        // η = λ: ELR = η, EWD = 1.
        let (e, w) = elr_ewd(0.05, 0.05).unwrap();
        assert!((e - 0.05).abs() < 1e-15 && (w - 1.0).abs() < 1e-15);
        // The base-model global values.
        let (e, w) = elr_ewd(256e-6, 0.1).unwrap();
        assert!((e - 5.0596e-3).abs() < 1e-7, "{e}");
        assert!((w - 19.7642).abs() < 1e-4, "{w}");
    }

    #[test]
    fn elr_ewd_roundtrip() {
        let (eta, lambda) = (3.7e-4, 0.23);
        let (e, w) = elr_ewd(eta, lambda).unwrap();
        let (eta2, lambda2) = elr_ewd_inverse(e, w);
        assert!((eta - eta2).abs() < 1e-15 && (lambda - lambda2).abs() < 1e-15);
    }

    #[test]
    fn elr_ewd_rejects_non_positive() {
        assert!(elr_ewd(0.0, 0.1).is_err());
        assert!(elr_ewd(1e-3, -0.1).is_err());
    }

    #[test]
    fn log_scale_orthogonality_is_exact() {
        for (eta, lambda) in [(1e-4, 0.1), (2e-3, 0.05), (0.7, 3.0)] {
            assert_eq!(elr_ewd_log_orthogonality(eta, lambda), 0.0);
        }
    }

    #[test]
    fn batch_scaling_examples() {
        assert_eq!(batch_scaled_lr(1e-3, 256.0, 256.0).unwrap(), 1e-3);
        assert_eq!(batch_scaled_lr(1e-3, 256.0, 1024.0).unwrap(), 2e-3);
        assert_eq!(batch_scaled_lr(1e-3, 256.0, 64.0).unwrap(), 5e-4);
    }

    #[test]
    fn ps_point_values() {
        let mut spec = flat_spec();
        spec.power = PowerMode::Ps { t0: 1e6 };
        assert_eq!(schedule_at(5e5, &spec).unwrap().eta, spec.eta0);
        assert_eq!(schedule_at(1e6, &spec).unwrap().eta, spec.eta0);
        let p = schedule_at(4e6, &spec).unwrap();
        assert!((p.eta - spec.eta0 / 2.0).abs() < 1e-18);
        assert_eq!(p.lambda, spec.lambda0);
    }

    #[test]
    fn eps_point_values() {
        let mut spec = flat_spec();
        spec.power = PowerMode::Eps { t0: 1e6 };
        let p = schedule_at(16e6, &spec).unwrap();
        assert!((p.eta - spec.eta0 / 2.0).abs() < 1e-18);
        assert!((p.lambda - spec.lambda0 / 2.0).abs() < 1e-18);
    }

    #[test]
    fn eps_keeps_ewd_constant_while_ps_grows_it() {
        let mut ps = flat_spec();
        ps.power = PowerMode::Ps { t0: 1e6 };
        let mut eps = flat_spec();
        eps.power = PowerMode::Eps { t0: 1e6 };
        let w0 = schedule_at(1e6, &eps).unwrap().lambda_eff;
        for t in [2e6, 8e6, 64e6] {
            let weps = schedule_at(t, &eps).unwrap().lambda_eff;
            assert!((weps - w0).abs() < 1e-12 * w0);
            let p = schedule_at(t, &ps).unwrap();
            // PS leaves λ constant, so EWD grows as t^{1/4}.
            assert_eq!(p.lambda, ps.lambda0);
            let expect = schedule_at(1e6, &ps).unwrap().lambda_eff * (t / 1e6).powf(0.25);
            assert!((p.lambda_eff - expect).abs() < 1e-9 * expect);
        }
    }

    #[test]
    fn continuity_at_phase_boundaries() {
        let spec = ScheduleSpec {
            eta0: 2e-3,
            lambda0: 0.1,
            warmup_tokens: 1e5,
            rampup: RampupSpec {
                b_start: 256.0,
                b_end: 2048.0,
                duration_tokens: 5e5,
                batch_scaling: true,
            },
            stable_tokens: 2e6,
            decay: DecaySpec { factor: 8.0, duration_tokens: 1e6 },
            power: PowerMode::None,
        };
        let eps = 1e-3;
        for boundary in [1e5, 5e5, 2e6, 3e6] {
            let a = schedule_at(boundary - eps, &spec).unwrap();
            let b = schedule_at(boundary + eps, &spec).unwrap();
            assert!((a.eta - b.eta).abs() < 1e-6 * spec.eta0, "eta jump at {boundary}");
            assert!(
                (a.batch_tokens - b.batch_tokens).abs() < 1.0,
                "batch jump at {boundary}"
            );
        }
        // Decay endpoint reaches eta/factor and stays there.
        let end = schedule_at(3e6, &spec).unwrap();
        let later = schedule_at(5e6, &spec).unwrap();
        assert!((end.eta - later.eta).abs() < 1e-18);
        assert!((later.eta - spec.eta0 / 8.0).abs() < 1e-12 * spec.eta0);
    }
}
