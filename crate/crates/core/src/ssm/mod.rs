//! Mamba2-style SSM mixer: recurrence, chunked scan, materialized mixing
//! matrix, input transform, hidden-state resetting and dt mitigation.

pub mod block;
mod scan;

pub use block::{
    mamba2_block_forward, mamba2_block_forward_stateful, ssm_block_state_passing, SsmDims,
    SsmLayerVars, SsmMults, RMS_EPS,
};
pub use scan::{
    apply_mixing, materialize_mixing_matrix, multihead_scan, ssm_scan_chunked,
    ssm_scan_sequential, HeadScanInput, SsmState, MATERIALIZE_MAX_T,
};

use crate::error::{CoreError, Result};

/// Decay-exponent bias injected at document boundaries. `exp(-80)` is about
/// 1.8e-35: above the bf16/fp16 underflow threshold yet empirically zero.
pub const RESET_BIAS: f64 = -80.0;

/// Mitigation applied to the dt activation (post-softplus).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DtPolicy {
    None,
    /// Clip dt from above.
    ClipPositive { dt_max: f64 },
    /// Multiply dt by `alpha` while `step <= k_steps`.
    Attenuate { alpha: f64, k_steps: u64 },
}

impl DtPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DtPolicy::None => Ok(()),
            DtPolicy::ClipPositive { dt_max } => {
                if dt_max > 0.0 {
                    Ok(())
                } else {
                    Err(CoreError::Config(format!("dt_max must be positive, got {dt_max}")))
                }
            }
            DtPolicy::Attenuate { alpha, .. } => {
                if alpha > 0.0 && alpha < 1.0 {
                    Ok(())
                } else {
                    Err(CoreError::Config(format!("attenuation alpha must be in (0,1), got {alpha}")))
                }
            }
        }
    }
}

/// dt mitigation on a raw value. Both modes are monotone non-increasing maps.
pub fn apply_dt_policy(dt: f64, policy: &DtPolicy, step: u64) -> f64 {
    match *policy {
        DtPolicy::None => dt,
        DtPolicy::ClipPositive { dt_max } => dt.min(dt_max),
        DtPolicy::Attenuate { alpha, k_steps } => {
            if step <= k_steps {
                alpha * dt
            } else {
                dt
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_and_none() {
        let clip = DtPolicy::ClipPositive { dt_max: 0.5 };
        assert_eq!(apply_dt_policy(0.7, &clip, 3), 0.5);
        assert_eq!(apply_dt_policy(0.3, &clip, 3), 0.3);
        assert_eq!(apply_dt_policy(0.7, &DtPolicy::None, 3), 0.7);
    }

    #[test]
    fn attenuate_boundary_inclusive_at_k() {
        let p = DtPolicy::Attenuate { alpha: 0.5, k_steps: 10 };
        assert_eq!(apply_dt_policy(1.2, &p, 10), 0.6);
        assert_eq!(apply_dt_policy(1.2, &p, 11), 1.2);
    }

    #[test]
    fn attenuate_example_from_block() {
        let p = DtPolicy::Attenuate { alpha: 0.25, k_steps: 100 };
        assert!((apply_dt_policy(0.8, &p, 5) - 0.2).abs() < 1e-15);
        assert!((apply_dt_policy(0.8, &p, 200) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn policies_are_monotone_non_increasing() {
        for policy in [
            DtPolicy::None,
            DtPolicy::ClipPositive { dt_max: 0.4 },
            DtPolicy::Attenuate { alpha: 0.3, k_steps: 50 },
        ] {
            for step in [0u64, 50, 51] {
                for dt in [1e-3, 0.1, 0.5, 2.0] {
                    assert!(apply_dt_policy(dt, &policy, step) <= dt);
                }
            }
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert!(DtPolicy::ClipPositive { dt_max: 0.0 }.validate().is_err());
        assert!(DtPolicy::Attenuate { alpha: 1.0, k_steps: 1 }.validate().is_err());
        assert!(DtPolicy::Attenuate { alpha: 0.5, k_steps: 1 }.validate().is_ok());
    }
}
