//! AdamW with decoupled weight decay and per-group learning-rate / weight-
//! decay multipliers. Matrix groups decay; vector-like groups train with
//! their own LR multipliers and no decay.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::model::{ParamKind, ParamStore};
use crate::mup::MuPMultiplierSet;
use crate::scalar::Scalar;
use crate::tape::GradMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// First/second moment accumulators plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState<S> {
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new() -> Self {
        OptimizerState { m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }
}

/// Per-group effective multipliers for one parameter kind.
pub fn group_multipliers(kind: ParamKind, mults: &MuPMultiplierSet) -> (f64, f64) {
    if let Some(g) = kind.matrix_group() {
        (mults.matrix_lr_value(g), mults.matrix_wd_value(g))
    } else if let Some(g) = kind.vector_group() {
        (mults.vector_lr_value(g), 0.0)
    } else {
        (1.0, 0.0)
    }
}

/// One AdamW step over every parameter with a gradient:
/// `W <- W - (η lr_mult)·A - (η lr_mult)(λ wd_mult)·W`, with
/// `A = m̂ / (sqrt(v̂) + ε)` and bias correction.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &GradMap<S>,
    mults: &MuPMultiplierSet,
    eta: f64,
    lambda: f64,
    state: &mut OptimizerState<S>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if eta < 0.0 || lambda < 0.0 {
        return Err(CoreError::contract("adamw_step: eta and lambda must be >= 0"));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let (ob1, ob2) = (S::from_f64(1.0 - cfg.beta1), S::from_f64(1.0 - cfg.beta2));
    let eps = S::from_f64(cfg.eps);

    for entry in params.entries_mut() {
        let Some(g) = grads.get(&entry.name) else { continue };
        if !g.all_finite() {
            return Err(CoreError::NonFinite {
                op: "adamw_step".into(),
                details: format!("gradient of parameter {}", entry.name),
            });
        }
        if g.shape() != entry.tensor.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "adamw_step",
                details: format!("gradient/parameter shapes differ for {}", entry.name),
            });
        }
        let (lr_mult, wd_mult) = group_multipliers(entry.kind, mults);
        let step_lr = S::from_f64(eta * lr_mult);
        let decay = S::from_f64(eta * lr_mult * lambda * wd_mult);
        let m = state
            .m
            .entry(entry.name.clone())
            .or_insert_with(|| Tensor::zeros(entry.tensor.shape()));
        let v = state
            .v
            .entry(entry.name.clone())
            .or_insert_with(|| Tensor::zeros(entry.tensor.shape()));
        let (c1, c2) = (S::from_f64(1.0 / bc1), S::from_f64(1.0 / bc2));
        for ((w, &gi), (mi, vi)) in entry
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            let mhat = *mi * c1;
            let vhat = *vi * c2;
            let denom = vhat.sqrt() + eps;
            let update = if denom > S::zero() { mhat / denom } else { S::zero() };
            *w = *w - step_lr * update - decay * *w;
        }
    }
    Ok(())
}
