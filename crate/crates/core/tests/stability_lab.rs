//! Stability lab: shared mixing-matrix convention with the scan, monotone
//! stability regions, and write/forget simulator behaviour.

use hybridlm_core::rng::derive;
use hybridlm_core::scalar::softplus;
use hybridlm_core::ssm::materialize_mixing_matrix;
use hybridlm_core::stability::{
    attenuated_hessian, feedback_eigen, log_mix_coeff, simulate_write_forget,
    stability_threshold, WriteForgetInstance, WriteForgetObjective,
};
use hybridlm_core::tensor::Tensor;
use rand::Rng;

type T64 = Tensor<f64>;

#[test]
fn log_coefficient_matches_scan_materialization() {
    // The lab's product-form log M_ts equals the log of the scan's
    // materialized entry: same empty-product convention, < 1e-10.
    let mut rng = derive(8, 0);
    for _ in 0..30 {
        let len = rng.gen_range(3..10usize);
        let inst = WriteForgetInstance {
            a_log: rng.gen_range(-1.0..1.0),
            dt_raw: (0..len).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            b: rng.gen_range(0.3..1.5),
            c: rng.gen_range(0.3..1.5),
            span: 4,
            alpha: 1.0,
            eta: 0.05,
        };
        // Scan-side single-channel instance with the activated time steps.
        let activated: Vec<f64> = inst.dt_raw.iter().map(|&w| softplus(w)).collect();
        let b = T64::full(&[len, 1], inst.b);
        let c = T64::full(&[len, 1], inst.c);
        let dt = T64::new(vec![len], activated).unwrap();
        let m =
            materialize_mixing_matrix(&b, &c, &dt, inst.a_log, 0.0, &vec![false; len]).unwrap();
        for t in 0..len {
            for s in 0..=t {
                let lab = log_mix_coeff(&inst, s, t).unwrap();
                let scan = m.at2(t, s).ln();
                assert!((lab - scan).abs() < 1e-10, "({t},{s}): {lab} vs {scan}");
            }
        }
    }
}

#[test]
fn stability_region_grows_as_alpha_decreases() {
    let grid = [
        [[2.0, 1.5], [1.5, 2.0]],
        [[1.0, 0.8], [0.8, 1.4]],
        [[3.0, 2.0], [2.0, 2.5]],
    ];
    for h in &grid {
        let mut last = 0.0;
        for &alpha in &[1.0, 0.8, 0.6, 0.4, 0.2] {
            let th = stability_threshold(&attenuated_hessian(h, alpha), 100.0)
                .unwrap()
                .unwrap_or(100.0);
            assert!(th >= last, "alpha {alpha}: threshold {th} < previous {last}");
            last = th;
        }
    }
}

#[test]
fn radius_grows_monotone_near_threshold() {
    let h = [[2.0, 1.5], [1.5, 2.0]];
    let eta_star = stability_threshold(&h, 2.0).unwrap().unwrap();
    let below = feedback_eigen(&h, eta_star * 0.9).unwrap();
    let above = feedback_eigen(&h, eta_star * 1.1).unwrap();
    assert!(below <= 1.0 + 1e-6);
    assert!(above > 1.0);
}

#[test]
fn small_learning_rate_converges_with_vanishing_amplitude() {
    let inst = WriteForgetInstance {
        a_log: -0.4,
        dt_raw: vec![0.2],
        b: 1.0,
        c: 1.0,
        span: 24,
        alpha: 1.0,
        eta: 0.01,
    };
    let out = simulate_write_forget(&inst, 6000, 1.0).unwrap();
    assert!(!out.diverged);
    assert!(out.amplitude_ratio() < 1.0);
    assert!(out.tail_amplitude < 1e-6, "tail amplitude {}", out.tail_amplitude);
    // And the trajectory approaches the analytic stationary point.
    let obj = WriteForgetObjective { span: 24.0, alpha: 1.0, anchor: inst.a_log };
    let (w_star, a_star) = obj.stationary_point();
    let last = out.trajectory.last().unwrap();
    assert!((last.dt_raw - w_star).abs() < 1e-3, "{} vs {}", last.dt_raw, w_star);
    assert!((last.a_log - a_star).abs() < 1e-3);
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let obj = WriteForgetObjective { span: 16.0, alpha: 0.7, anchor: 0.2 };
    let h = 1e-6;
    for (w, a) in [(0.3, -0.5), (-1.0, 0.4), (2.0, 0.0)] {
        let g = obj.grad(w, a);
        let fd_w = (obj.loss(w + h, a) - obj.loss(w - h, a)) / (2.0 * h);
        let fd_a = (obj.loss(w, a + h) - obj.loss(w, a - h)) / (2.0 * h);
        assert!((g[0] - fd_w).abs() < 1e-6);
        assert!((g[1] - fd_a).abs() < 1e-6);
    }
}

#[test]
fn stationary_hessian_matches_finite_differences() {
    let obj = WriteForgetObjective { span: 24.0, alpha: 1.0, anchor: -0.4 };
    let (w, a) = obj.stationary_point();
    // The gradient vanishes at the stationary point.
    let g = obj.grad(w, a);
    assert!(g[0].abs() < 1e-10 && g[1].abs() < 1e-10, "{g:?}");
    let h = obj.stationary_hessian();
    let step = 1e-5;
    let fd = [
        [
            (obj.grad(w + step, a)[0] - obj.grad(w - step, a)[0]) / (2.0 * step),
            (obj.grad(w, a + step)[0] - obj.grad(w, a - step)[0]) / (2.0 * step),
        ],
        [
            (obj.grad(w + step, a)[1] - obj.grad(w - step, a)[1]) / (2.0 * step),
            (obj.grad(w, a + step)[1] - obj.grad(w, a - step)[1]) / (2.0 * step),
        ],
    ];
    for i in 0..2 {
        for j in 0..2 {
            assert!((h[i][j] - fd[i][j]).abs() < 1e-4, "H[{i}][{j}]: {} vs {}", h[i][j], fd[i][j]);
        }
    }
}
