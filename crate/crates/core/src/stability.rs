//! Write/forget dynamics lab: analytic gradients of the mixing coefficients,
//! perturbation analysis, the delayed-feedback eigenvalue criterion, and the
//! attenuation mitigation — all on scalar per-head toy instances.
//!
//! Notation: `dt_raw` is the pre-activation time step, `sp = softplus(dt_raw)`
//! the activated one, `abar_i = exp(-e^{a_log} sp_i)` the decay factor, and
//! for `s <= t`
//!
//! ```text
//! log M_ts = ln(c·b) + ln sp_s - e^{a_log} Σ_{i=s+1..t} sp_i
//! ```
//!
//! which matches the materialized mixing matrix of the scan (same empty-
//! product convention).

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::scalar::{sigmoid, softplus, softplus_inv};

/// A scalar write/forget toy instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteForgetInstance {
    pub a_log: f64,
    /// Pre-softplus time steps, one per position.
    pub dt_raw: Vec<f64>,
    /// Write and read projections (positive scalars).
    pub b: f64,
    pub c: f64,
    /// Retention span.
    pub span: usize,
    /// Attenuation factor in (0, 1].
    pub alpha: f64,
    /// Learning rate for the simulator.
    pub eta: f64,
}

impl WriteForgetInstance {
    pub fn validate(&self) -> Result<()> {
        if self.span < 1 {
            return Err(CoreError::Config("span must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CoreError::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if self.b <= 0.0 || self.c <= 0.0 {
            return Err(CoreError::Config("b and c must be positive".into()));
        }
        Ok(())
    }

    fn sp(&self, i: usize) -> f64 {
        softplus(self.dt_raw[i])
    }
}

/// `log M_ts` of the instance (no resets, scalar head).
pub fn log_mix_coeff(inst: &WriteForgetInstance, s: usize, t: usize) -> Result<f64> {
    inst.validate()?;
    if s > t || t >= inst.dt_raw.len() {
        return Err(CoreError::contract(format!(
            "log_mix_coeff: need s <= t < len, got s={s}, t={t}, len={}",
            inst.dt_raw.len()
        )));
    }
    let mut l = (inst.c * inst.b).ln() + inst.sp(s).ln();
    let ea = inst.a_log.exp();
    for i in s + 1..=t {
        l -= ea * inst.sp(i);
    }
    Ok(l)
}

/// Per-coordinate gradient of `log M_ts` with respect to each `dt_raw[i]`:
/// the positive write term `σ(dt_raw_s)/sp_s` at `i = s`, the negative decay
/// term `-e^{a_log} σ(dt_raw_i)` for `s < i <= t`, zero elsewhere.
pub fn grad_log_mix_dt_coords(
    inst: &WriteForgetInstance,
    s: usize,
    t: usize,
) -> Result<Vec<f64>> {
    inst.validate()?;
    if s > t || t >= inst.dt_raw.len() {
        return Err(CoreError::contract("grad_log_mix_dt_coords: need s <= t < len"));
    }
    let ea = inst.a_log.exp();
    let mut g = vec![0.0; inst.dt_raw.len()];
    g[s] = sigmoid(inst.dt_raw[s]) / inst.sp(s);
    for (i, gi) in g.iter_mut().enumerate().take(t + 1).skip(s + 1) {
        *gi = -ea * sigmoid(inst.dt_raw[i]);
    }
    Ok(g)
}

/// Combined write+decay derivative of `log M_ts` along a uniform shift of
/// the time steps on `s..=t` (the direction a shared dt projection moves):
/// the positive write term minus the aggregated decay terms. Reduces to the
/// pure write term `σ(dt_raw_s)/sp_s` as `a_log -> -inf`.
pub fn grad_log_mix_dt(inst: &WriteForgetInstance, s: usize, t: usize) -> Result<f64> {
    if s >= t {
        return Err(CoreError::contract(format!(
            "grad_log_mix_dt: need s < t, got s={s}, t={t}"
        )));
    }
    Ok(grad_log_mix_dt_coords(inst, s, t)?.iter().sum())
}

/// Gradient of a loss with respect to `a_log` given upstream sensitivities
/// `∂L/∂abar_i`: `-e^{a_log} Σ_i sp_i abar_i (∂L/∂abar_i)`. Strictly
/// negative whenever every upstream sensitivity is positive.
pub fn grad_loss_a_log(inst: &WriteForgetInstance, upstream: &[f64]) -> Result<f64> {
    inst.validate()?;
    if upstream.len() != inst.dt_raw.len() {
        return Err(CoreError::contract("grad_loss_a_log: upstream length mismatch"));
    }
    if upstream.iter().any(|u| !u.is_finite()) {
        return Err(CoreError::NonFinite {
            op: "grad_loss_a_log".into(),
            details: "upstream sensitivities".into(),
        });
    }
    let ea = inst.a_log.exp();
    let mut acc = 0.0;
    for (i, &u) in upstream.iter().enumerate() {
        let sp = inst.sp(i);
        let abar = (-ea * sp).exp();
        acc += sp * abar * u;
    }
    Ok(-ea * acc)
}

/// Extra memory-trace decay caused by perturbing one time step by
/// `delta_dt >= 0`: `exp(-e^{a_log} delta_dt)`. The write factor grows only
/// linearly in the same perturbation, so a modest write gain buys a
/// disproportionate context loss.
pub fn memory_decay_factor(a_log: f64, delta_dt: f64) -> f64 {
    debug_assert!(delta_dt >= 0.0);
    (-a_log.exp() * delta_dt).exp()
}

/// Lipschitz proxy of the attenuated write–forget map:
/// `(1 - α) + α e^{a_log}`. Equals 1 for every α at `a_log = 0`.
pub fn attenuation_lipschitz(alpha: f64, a_log: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha));
    (1.0 - alpha) + alpha * a_log.exp()
}

/// Width-instability proxy: the largest eigenvalue of the combined Jacobian
/// grows roughly as `1 + η · head_count · grad_var`, so widening (more
/// heads) enlarges the unstable write/forget subspace while depth only
/// deepens the decay products and damps it. Documented formula only, no
/// acceptance threshold.
///
/// Here `head_count` is the number of per-head (dt, a_log) pairs and
/// `grad_var` the variance of the dt gradient — not the 2×2 Hessian or the
/// init standard deviation used elsewhere in this module, which reuse the
/// same letters in the underlying analysis.
pub fn width_eigenvalue_proxy(eta: f64, head_count: usize, grad_var: f64) -> f64 {
    1.0 + eta * head_count as f64 * grad_var
}

/// Spectral radius of the delayed-update linearization around a stationary
/// point: the diagonal of the Hessian acts on the current iterate while the
/// cross-coupling acts one step late,
///
/// ```text
/// θ_{k+1} = θ_k - η (D θ_k + O θ_{k-1})
/// ```
///
/// realized as the 4×4 companion system `[[I - ηD, -ηO], [I, 0]]`. A radius
/// above 1 flags instability.
pub fn feedback_eigen(hessian: &[[f64; 2]; 2], eta: f64) -> Result<f64> {
    if (hessian[0][1] - hessian[1][0]).abs() > 1e-12 * hessian[0][1].abs().max(1.0) {
        return Err(CoreError::contract("feedback_eigen: Hessian must be symmetric"));
    }
    let (d0, d1) = (hessian[0][0], hessian[1][1]);
    let o = hessian[0][1];
    let m = Matrix4::new(
        1.0 - eta * d0,
        0.0,
        0.0,
        -eta * o,
        0.0,
        1.0 - eta * d1,
        -eta * o,
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
    );
    let eigs = m.complex_eigenvalues();
    Ok(eigs.iter().map(|z| z.norm_sqr().sqrt()).fold(0.0, f64::max))
}

/// Scale the dt row/column of the Hessian by α, the effect of attenuating
/// the write gate on the local curvature.
pub fn attenuated_hessian(hessian: &[[f64; 2]; 2], alpha: f64) -> [[f64; 2]; 2] {
    [
        [alpha * alpha * hessian[0][0], alpha * hessian[0][1]],
        [alpha * hessian[1][0], hessian[1][1]],
    ]
}

/// Smallest learning rate at which the delayed linearization leaves the
/// unit circle, found by a scan plus bisection. `None` if the system stays
/// stable up to `eta_max`.
pub fn stability_threshold(hessian: &[[f64; 2]; 2], eta_max: f64) -> Result<Option<f64>> {
    const MARGIN: f64 = 1e-9;
    let radius = |eta: f64| feedback_eigen(hessian, eta);
    let n = 400;
    let mut lo = 0.0f64;
    let mut hi = None;
    for i in 1..=n {
        let eta = eta_max * i as f64 / n as f64;
        if radius(eta)? > 1.0 + MARGIN {
            hi = Some(eta);
            break;
        }
        lo = eta;
    }
    let Some(mut hi) = hi else { return Ok(None) };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if radius(mid)? > 1.0 + MARGIN {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(0.5 * (lo + hi)))
}

/// The two-term antagonistic objective driving the simulator, on the shared
/// scalar pair `(dt_raw, a_log)`:
///
/// ```text
/// L(w, a) = -ln(α sp(w))                       (write reward at s)
///         + span · e^a · α sp(w)               (retention penalty -ln Π abar)
///         + (κ/2)(a - a0)²                     (weak anchor, κ = 1)
/// ```
///
/// Write reward and retention penalty are weighted 1:1; the quadratic anchor
/// (to the instance's initial `a_log`) gives the system a finite stationary
/// point to oscillate around.
pub const ANCHOR_KAPPA: f64 = 1.0;

#[derive(Debug, Clone, Copy)]
pub struct WriteForgetObjective {
    pub span: f64,
    pub alpha: f64,
    pub anchor: f64,
}

impl WriteForgetObjective {
    pub fn loss(&self, w: f64, a: f64) -> f64 {
        let sp = softplus(w);
        -(self.alpha * sp).ln()
            + self.span * a.exp() * self.alpha * sp
            + 0.5 * ANCHOR_KAPPA * (a - self.anchor) * (a - self.anchor)
    }

    pub fn grad(&self, w: f64, a: f64) -> [f64; 2] {
        let sp = softplus(w);
        let sg = sigmoid(w);
        let e = self.span * a.exp();
        [
            -sg / sp + self.alpha * e * sg,
            self.alpha * e * sp + ANCHOR_KAPPA * (a - self.anchor),
        ]
    }

    /// Closed-form stationary point: `a* = a0 - 1/κ`, then
    /// `sp(w*) = 1/(α span e^{a*})`.
    pub fn stationary_point(&self) -> (f64, f64) {
        let a = self.anchor - 1.0 / ANCHOR_KAPPA;
        let sp = 1.0 / (self.alpha * self.span * a.exp());
        (softplus_inv(sp), a)
    }

    /// Analytic Hessian at the stationary point:
    /// `[[g², g], [g, 1 + κ]]` with `g = σ(w*)/sp(w*)`. The off-diagonal
    /// `g` is the write–forget coupling; it stiffens as the stationary time
    /// step shrinks.
    pub fn stationary_hessian(&self) -> [[f64; 2]; 2] {
        let (w, _) = self.stationary_point();
        let g = sigmoid(w) / softplus(w);
        [[g * g, g], [g, 1.0 + ANCHOR_KAPPA]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub dt_raw: f64,
    pub a_log: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub trajectory: Vec<TrajectoryPoint>,
    /// Peak-to-peak amplitude of dt_raw over the last quarter of the run.
    pub tail_amplitude: f64,
    /// Same over the preceding quarter; ratio below 1 means decay.
    pub prev_amplitude: f64,
    pub diverged: bool,
}

impl SimOutcome {
    pub fn amplitude_ratio(&self) -> f64 {
        if self.prev_amplitude == 0.0 {
            if self.tail_amplitude == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.tail_amplitude / self.prev_amplitude
        }
    }
}

/// Gradient updates on `(dt_raw, a_log)` against [`WriteForgetObjective`]
/// with the one-step feedback delay of the write–forget coupling: each
/// partial derivative sees the other coordinate one iteration late, which is
/// exactly the linearization [`feedback_eigen`] analyses. Starts from the
/// instance's `(dt_raw[0], a_log)`, anchored at the initial `a_log`.
pub fn simulate_write_forget(
    inst: &WriteForgetInstance,
    steps: usize,
    alpha: f64,
) -> Result<SimOutcome> {
    inst.validate()?;
    if steps < 8 {
        return Err(CoreError::contract("simulate_write_forget: need at least 8 steps"));
    }
    let obj = WriteForgetObjective { span: inst.span as f64, alpha, anchor: inst.a_log };
    let mut w = inst.dt_raw[0];
    let mut a = inst.a_log;
    let (mut w_prev, mut a_prev) = (w, a);
    let mut traj = Vec::with_capacity(steps);
    let mut diverged = false;
    for step in 0..steps {
        let sp = softplus(w);
        let sg = sigmoid(w);
        let e_stale = obj.span * a_prev.exp();
        let gw = -sg / sp + obj.alpha * e_stale * sg;
        let e_now = obj.span * a.exp();
        let ga = obj.alpha * e_now * softplus(w_prev) + ANCHOR_KAPPA * (a - obj.anchor);
        w_prev = w;
        a_prev = a;
        w -= inst.eta * gw;
        a -= inst.eta * ga;
        let loss = obj.loss(w, a);
        traj.push(TrajectoryPoint { step, dt_raw: w, a_log: a, loss });
        if !w.is_finite() || !a.is_finite() || w.abs() > 1e9 || a.abs() > 1e9 {
            diverged = true;
            break;
        }
    }
    let n = traj.len();
    let quarter = (n / 4).max(1);
    let ptp = |lo: usize, hi: usize| -> f64 {
        let xs = &traj[lo..hi];
        let max = xs.iter().map(|p| p.dt_raw).fold(f64::NEG_INFINITY, f64::max);
        let min = xs.iter().map(|p| p.dt_raw).fold(f64::INFINITY, f64::min);
        max - min
    };
    let tail_amplitude = ptp(n - quarter, n);
    let prev_amplitude = ptp(n - 2 * quarter, n - quarter);
    Ok(SimOutcome { trajectory: traj, tail_amplitude, prev_amplitude, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> WriteForgetInstance {
        WriteForgetInstance {
            a_log: 0.3,
            dt_raw: vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.7],
            b: 0.8,
            c: 1.3,
            span: 8,
            alpha: 1.0,
            eta: 0.05,
        }
    }

    #[test]
    fn write_term_only_when_decay_vanishes() {
        let mut inst = instance();
        inst.a_log = -60.0; // e^{a_log} ~ 0
        let g = grad_log_mix_dt(&inst, 1, 4).unwrap();
        let expect = sigmoid(inst.dt_raw[1]) / softplus(inst.dt_raw[1]);
        assert!((g - expect).abs() < 1e-12);
    }

    #[test]
    fn forgetting_dominates_for_large_a_log() {
        let mut inst = instance();
        inst.a_log = 2.0;
        // Aggregate over future read positions: strictly negative.
        let total: f64 = (2..inst.dt_raw.len())
            .map(|t| grad_log_mix_dt(&inst, 1, t).unwrap())
            .sum();
        assert!(total < 0.0, "got {total}");
    }

    #[test]
    fn a_log_gradient_signs() {
        let inst = instance();
        assert_eq!(grad_loss_a_log(&inst, &[0.0; 6]).unwrap(), 0.0);
        let g = grad_loss_a_log(&inst, &[0.2, 0.5, 1.0, 0.1, 0.9, 0.3]).unwrap();
        assert!(g < 0.0, "positive upstream must aggregate negatively, got {g}");
    }

    #[test]
    fn memory_decay_values() {
        assert_eq!(memory_decay_factor(0.7, 0.0), 1.0);
        // a_log = 0, δdt = 0.02: about 2% extra context loss.
        let f = memory_decay_factor(0.0, 0.02);
        assert!((f - 0.980198673306755).abs() < 1e-12);
        // a_log = ln 2 doubles the exponent.
        let f2 = memory_decay_factor(2f64.ln(), 0.02);
        assert!((f2 - f * f).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_endpoints_and_fixed_point() {
        let a_log = 0.8;
        assert!((attenuation_lipschitz(1.0, a_log) - a_log.exp()).abs() < 1e-15);
        assert_eq!(attenuation_lipschitz(0.0, a_log), 1.0);
        for alpha in [0.1, 0.3, 0.7, 1.0] {
            assert!((attenuation_lipschitz(alpha, 0.0) - 1.0).abs() < 1e-15);
        }
        // Monotone in α when a_log > 0.
        assert!(attenuation_lipschitz(0.6, a_log) > attenuation_lipschitz(0.2, a_log));
    }

    #[test]
    fn neutral_and_contracting_radius() {
        assert!((feedback_eigen(&[[0.0, 0.0], [0.0, 0.0]], 0.1).unwrap() - 1.0).abs() < 1e-12);
        let h = [[2.0, 0.3], [0.3, 1.0]];
        let r = feedback_eigen(&h, 1e-3).unwrap();
        assert!(r < 1.0, "small steps on a positive definite Hessian contract, got {r}");
    }

    #[test]
    fn asymmetric_hessian_rejected() {
        assert!(feedback_eigen(&[[1.0, 0.5], [0.2, 1.0]], 0.1).is_err());
    }
}
