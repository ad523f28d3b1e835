//! Optimizer behaviour against an independent scalar reference, group
//! isolation, Monte-Carlo agreement of the toy model, and ELR/EWD
//! properties.

use hybridlm_core::model::{ParamKind, ParamStore};
use hybridlm_core::mup::{MatrixGroup, MuPMultiplierSet, ShapeSet};
use hybridlm_core::optim::{adamw_step, AdamWConfig, OptimizerState};
use hybridlm_core::schedule::{elr_ewd, elr_ewd_inverse};
use hybridlm_core::tape::GradMap;
use hybridlm_core::tensor::Tensor;
use hybridlm_core::toy::{toy_simulate, toy_stationary_moments, ToyModelSpec};
use proptest::prelude::*;

type T64 = Tensor<f64>;

fn unit_mults() -> MuPMultiplierSet {
    MuPMultiplierSet::unit(ShapeSet::reference())
}

#[test]
fn zero_gradients_without_decay_keep_parameters() {
    let mut params = ParamStore::new();
    params.insert("w", ParamKind::MatrixUp, T64::full(&[2, 2], 3.0));
    let mut grads = GradMap::new();
    grads.insert("w".into(), T64::zeros(&[2, 2]));
    let mut state = OptimizerState::new();
    adamw_step(&mut params, &grads, &unit_mults(), 1e-2, 0.0, &mut state, &AdamWConfig::default())
        .unwrap();
    assert!(params.get("w").unwrap().tensor.data().iter().all(|&v| v == 3.0));
}

#[test]
fn zero_gradients_with_decay_shrink_multiplicatively() {
    let mut params = ParamStore::new();
    params.insert("w", ParamKind::MatrixUp, T64::full(&[2, 2], 3.0));
    let mut grads = GradMap::new();
    grads.insert("w".into(), T64::zeros(&[2, 2]));
    let mut state = OptimizerState::new();
    let (eta, lambda) = (1e-2, 0.2);
    adamw_step(&mut params, &grads, &unit_mults(), eta, lambda, &mut state, &AdamWConfig::default())
        .unwrap();
    let expect = 3.0 * (1.0 - eta * lambda);
    assert!(params.get("w").unwrap().tensor.data().iter().all(|&v| (v - expect).abs() < 1e-15));
}

#[test]
fn vector_groups_never_decay() {
    let mut params = ParamStore::new();
    params.insert("gain", ParamKind::NormFinal, T64::full(&[4], 1.0));
    let mut grads = GradMap::new();
    grads.insert("gain".into(), T64::zeros(&[4]));
    let mut state = OptimizerState::new();
    adamw_step(&mut params, &grads, &unit_mults(), 1e-2, 0.5, &mut state, &AdamWConfig::default())
        .unwrap();
    assert!(params.get("gain").unwrap().tensor.data().iter().all(|&v| v == 1.0));
}

/// Independent scalar AdamW written from the update equations, for the
/// 20-step comparison.
struct ScalarAdamW {
    m: f64,
    v: f64,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl ScalarAdamW {
    fn step(&mut self, w: f64, g: f64, eta: f64, lambda: f64) -> f64 {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * g * g;
        let mhat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let vhat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        w - eta * mhat / (vhat.sqrt() + self.eps) - eta * lambda * w
    }
}

#[test]
fn twenty_steps_match_scalar_reference() {
    let cfg = AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8 };
    let mut params = ParamStore::new();
    params.insert("w", ParamKind::MatrixUp, T64::scalar(0.7));
    let mut state = OptimizerState::new();
    let mut reference = ScalarAdamW { m: 0.0, v: 0.0, t: 0, beta1: 0.9, beta2: 0.95, eps: 1e-8 };
    let mut w_ref = 0.7;
    let (eta, lambda) = (3e-2, 0.1);
    for k in 0..20 {
        let g = (k as f64 * 0.37).sin() + 0.2;
        let mut grads = GradMap::new();
        grads.insert("w".into(), T64::scalar(g));
        adamw_step(&mut params, &grads, &unit_mults(), eta, lambda, &mut state, &cfg).unwrap();
        w_ref = reference.step(w_ref, g, eta, lambda);
        let w = params.get("w").unwrap().tensor.item();
        assert!((w - w_ref).abs() < 1e-15, "step {k}: {w} vs {w_ref}");
    }
}

#[test]
fn group_multiplier_isolation() {
    // Perturb one group's LR multiplier: only that group's parameters move
    // differently after one step.
    let build = || {
        let mut params = ParamStore::new();
        params.insert("up", ParamKind::MatrixUp, T64::full(&[2], 1.0));
        params.insert("down", ParamKind::MatrixDown, T64::full(&[2], 1.0));
        params
    };
    let mut grads = GradMap::new();
    grads.insert("up".into(), T64::full(&[2], 0.3));
    grads.insert("down".into(), T64::full(&[2], 0.3));

    let run = |mults: &MuPMultiplierSet| {
        let mut params = build();
        let mut state = OptimizerState::new();
        adamw_step(&mut params, &grads, mults, 1e-2, 0.1, &mut state, &AdamWConfig::default())
            .unwrap();
        (
            params.get("up").unwrap().tensor.data()[0],
            params.get("down").unwrap().tensor.data()[0],
        )
    };
    let base = run(&unit_mults());
    let mut boosted = unit_mults();
    *boosted.matrix_lr.get_mut(&MatrixGroup::Up).unwrap() = 4.0;
    let changed = run(&boosted);
    assert_ne!(base.0, changed.0, "boosted group must move differently");
    assert_eq!(base.1, changed.1, "other group must be untouched");
}

#[test]
fn nan_gradient_names_parameter() {
    let mut params = ParamStore::new();
    params.insert("w", ParamKind::MatrixUp, T64::scalar(1.0));
    let mut grads = GradMap::new();
    grads.insert("w".into(), T64::scalar(f64::NAN));
    let mut state = OptimizerState::new();
    let err = adamw_step(
        &mut params,
        &grads,
        &unit_mults(),
        1e-2,
        0.1,
        &mut state,
        &AdamWConfig::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
}

#[test]
fn monte_carlo_matches_closed_form_within_three_se() {
    let spec = ToyModelSpec {
        h: 0.02,
        x_star: 0.5,
        sigma: 0.4,
        eta: 5e-3,
        lambda: 0.1,
        steps: 50_000,
        seed: 0,
    };
    let closed = toy_stationary_moments(&spec).unwrap();
    let mut means = Vec::new();
    let mut seconds = Vec::new();
    for seed in 0..20 {
        let r = toy_simulate(&ToyModelSpec { seed, ..spec }).unwrap();
        assert!(r.stationary);
        means.push(r.mean);
        seconds.push(r.second_moment);
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        (m, (var / v.len() as f64).sqrt())
    };
    let (m, se_m) = stats(&means);
    let (s, se_s) = stats(&seconds);
    assert!((m - closed.x_inf).abs() <= 3.0 * se_m, "mean {m} vs {} (SE {se_m})", closed.x_inf);
    assert!((s - closed.x2_inf).abs() <= 3.0 * se_s, "x2 {s} vs {} (SE {se_s})", closed.x2_inf);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn elr_ewd_roundtrip_is_exact(eta in 1e-6..1.0f64, lambda in 1e-4..10.0f64) {
        let (e, w) = elr_ewd(eta, lambda).unwrap();
        let (eta2, lambda2) = elr_ewd_inverse(e, w);
        prop_assert!((eta - eta2).abs() <= 1e-15 * eta.abs());
        prop_assert!((lambda - lambda2).abs() <= 1e-15 * lambda.abs());
    }
}
