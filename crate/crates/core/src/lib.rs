//! Desk-scale hybrid attention/SSM language model, built verification-first.
//!
//! The crate implements the full stack needed to train and analyse a small
//! hybrid model on a single CPU:
//!
//! * [`tensor`] / [`tape`] — a deterministic reverse-mode autodiff engine with
//!   a finite-difference oracle ([`fd`]).
//! * [`ssm`] — the Mamba2-style mixer: sequential and chunked scans, the
//!   materialized mixing-matrix oracle, hidden-state resetting and dt policies.
//! * [`attn`] — grouped-query attention with configurable-base RoPE and
//!   cross-document masking.
//! * [`block`] / [`model`] — channel allocation, the SAM / SA_M / S_A_M block
//!   arrangements, and the full embedding-to-logits model with checkpoints.
//! * [`mup`] — the 35-multiplier system: width-scaling transfer, the exact
//!   rescaling symmetry, and the stagewise micro-sweep tuner.
//! * [`optim`] / [`schedule`] / [`toy`] / [`throughput`] — AdamW with
//!   per-group multipliers, ELR/EWD accounting, WSD/PS/EPS schedules, the
//!   scalar stochastic toy model, and data-parallel throughput.
//! * [`stability`] — the write/forget instability lab: analytic gradients,
//!   delayed-feedback eigenvalues, and attenuation experiments.
//! * [`data`] / [`trainer`] — deterministic data loading, document packing,
//!   and the resumable training loop.
//! * [`verify`] — the acceptance suite shared by `cargo test` and the CLI.
//!
//! Core numerics are generic over the scalar type: `f64` is the
//! verification-grade precision used by all oracle and gradient suites, `f32`
//! the training-grade precision for harness runs.

pub mod attn;
pub mod block;
pub mod config;
pub mod data;
pub mod error;
pub mod fd;
pub mod model;
pub mod mup;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod ssm;
pub mod stability;
pub mod tape;
pub mod tensor;
pub mod throughput;
pub mod toy;
pub mod trainer;
pub mod verify;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Verification-grade tensor (~1e-15 ulp).
pub type Tensor64 = Tensor<f64>;
/// Training-grade tensor (~1e-7 ulp).
pub type Tensor32 = Tensor<f32>;

/// Numeric precision of a model or run. Always an explicit config field,
/// never inferred from context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f64`; used by every equivalence and gradient suite.
    Verification,
    /// `f32`; used by harness training runs.
    Training,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Verification => "f64",
            Precision::Training => "f32",
        }
    }
}
