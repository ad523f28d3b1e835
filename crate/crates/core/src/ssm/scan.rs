//! Selective-scan recurrence and its verification oracles.
//!
//! Convention, pinned by requiring scan ≡ materialized matrix: the state is
//! updated first, then read, so `y_t` sees the write of `x_t` and the
//! mixing-matrix diagonal carries an empty decay product:
//!
//! ```text
//! h_t = abar_t h_{t-1} + B_t dt_t x_t,   y_t = C_t·h_t + D x_t
//! M_ts = C_t·B_s dt_s · prod_{i=s+1..t} abar_i + D δ_ts
//! abar_i = exp(-e^{A_log} dt_i - 80 r_i)
//! ```
//!
//! The chunked scan accumulates decay in log space so that multiple resets
//! inside one chunk cannot underflow intermediate products.

use super::RESET_BIAS;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hard cap for the materialized oracle; it is a verification tool only.
pub const MATERIALIZE_MAX_T: usize = 512;

/// Per-head recurrent state plus the convolution tail cache handed across
/// chunk boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState<S> {
    /// `[H, P, N]` hidden state.
    pub hidden: Tensor<S>,
    /// Last `k-1` pre-conv input rows (`[k-1, C]`).
    pub conv_tail: Tensor<S>,
    /// How many of the tail rows belong to the current document (resets
    /// invalidate the tail).
    pub tail_valid: usize,
}

impl<S: Scalar> SsmState<S> {
    pub fn zeros(heads: usize, d_head: usize, d_state: usize, conv_k: usize, channels: usize) -> Self {
        SsmState {
            hidden: Tensor::zeros(&[heads, d_head, d_state]),
            conv_tail: Tensor::zeros(&[conv_k.saturating_sub(1), channels]),
            tail_valid: 0,
        }
    }
}

/// One head's scan inputs. `x: [T, P]`, `b`/`c`: `[T, N]`, `dt: [T]` positive.
pub struct HeadScanInput<'a, S> {
    pub x: &'a Tensor<S>,
    pub b: &'a Tensor<S>,
    pub c: &'a Tensor<S>,
    pub dt: &'a Tensor<S>,
    pub a_log: f64,
    pub d_skip: f64,
    pub resets: &'a [bool],
}

impl<'a, S: Scalar> HeadScanInput<'a, S> {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (xs, bs, cs, ds) = (self.x.shape(), self.b.shape(), self.c.shape(), self.dt.shape());
        if xs.len() != 2 || bs.len() != 2 || bs != cs || ds != [xs[0]] || bs[0] != xs[0] {
            return Err(CoreError::ShapeMismatch {
                op: "ssm_scan",
                details: format!("x {xs:?}, b {bs:?}, c {cs:?}, dt {ds:?}"),
            });
        }
        if self.resets.len() != xs[0] {
            return Err(CoreError::contract("ssm_scan: resets length != T"));
        }
        for (t, &d) in self.dt.data().iter().enumerate() {
            if !(d > S::zero()) {
                return Err(CoreError::contract(format!(
                    "ssm_scan: dt must be positive (post-softplus), got {d} at t={t}"
                )));
            }
        }
        if !self.x.all_finite() || !self.b.all_finite() || !self.c.all_finite() {
            return Err(CoreError::contract("ssm_scan: non-finite input"));
        }
        Ok((xs[0], xs[1], bs[1]))
    }

    fn log_abar(&self, t: usize) -> f64 {
        let mut l = -self.a_log.exp() * self.dt.data()[t].as_f64();
        if self.resets[t] {
            l += RESET_BIAS;
        }
        l
    }
}

/// Reference recurrence, one timestep at a time. `init: [P, N]`.
pub fn ssm_scan_sequential<S: Scalar>(
    input: &HeadScanInput<S>,
    init: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (t_len, p, n) = input.dims()?;
    if init.shape() != [p, n] {
        return Err(CoreError::ShapeMismatch {
            op: "ssm_scan",
            details: format!("init {:?}, expected [{p}, {n}]", init.shape()),
        });
    }
    let mut h = init.clone();
    let mut y = vec![S::zero(); t_len * p];
    for t in 0..t_len {
        let a = S::from_f64(input.log_abar(t).exp());
        let dt = input.dt.data()[t];
        let brow = input.b.row(t);
        let crow = input.c.row(t);
        for pi in 0..p {
            let xval = input.x.at2(t, pi);
            let write = dt * xval;
            let mut acc = S::from_f64(input.d_skip) * xval;
            for ni in 0..n {
                let hv = a * h.at2(pi, ni) + write * brow[ni];
                h.set2(pi, ni, hv);
                acc += hv * crow[ni];
            }
            if !acc.is_finite() {
                return Err(CoreError::NonFinite {
                    op: "ssm_scan_sequential".into(),
                    details: format!("state at timestep {t}"),
                });
            }
            y[t * p + pi] = acc;
        }
    }
    Ok((Tensor::new(vec![t_len, p], y)?, h))
}

/// Chunked scan with inter-chunk state passing. Within a chunk the output is
/// assembled from log-space decay prefix sums (the duality form); across
/// chunks only the final hidden state is handed over. Equivalent to the
/// sequential scan for every chunk size.
pub fn ssm_scan_chunked<S: Scalar>(
    input: &HeadScanInput<S>,
    init: &Tensor<S>,
    chunk_size: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if chunk_size == 0 {
        return Err(CoreError::contract("ssm_scan_chunked: chunk_size must be >= 1"));
    }
    let (t_len, p, n) = input.dims()?;
    if init.shape() != [p, n] {
        return Err(CoreError::ShapeMismatch {
            op: "ssm_scan_chunked",
            details: format!("init {:?}, expected [{p}, {n}]", init.shape()),
        });
    }
    let mut h = init.to_f64_vec(); // [P, N]
    let mut y = vec![S::zero(); t_len * p];
    let mut log_decay = Vec::with_capacity(chunk_size);
    let mut start = 0usize;
    while start < t_len {
        let end = (start + chunk_size).min(t_len);
        let lc = end - start;
        // Inclusive log-decay prefix within the chunk.
        log_decay.clear();
        let mut cum = 0.0f64;
        for t in start..end {
            cum += input.log_abar(t);
            log_decay.push(cum);
        }
        for (i, t) in (start..end).enumerate() {
            let crow = input.c.row(t);
            let carry = log_decay[i].exp();
            for pi in 0..p {
                // Contribution of the carried-in state.
                let mut acc = 0.0f64;
                for ni in 0..n {
                    acc += crow[ni].as_f64() * h[pi * n + ni];
                }
                let mut yv = carry * acc + input.d_skip * input.x.at2(t, pi).as_f64();
                // Intra-chunk writes s <= i, decayed by exp(L_i - L_s).
                for (s, ts) in (start..=t).enumerate() {
                    let decay = (log_decay[i] - log_decay[s]).exp();
                    let mut cb = 0.0f64;
                    let bs = input.b.row(ts);
                    for ni in 0..n {
                        cb += crow[ni].as_f64() * bs[ni].as_f64();
                    }
                    yv += decay * cb * input.dt.data()[ts].as_f64() * input.x.at2(ts, pi).as_f64();
                }
                if !yv.is_finite() {
                    return Err(CoreError::NonFinite {
                        op: "ssm_scan_chunked".into(),
                        details: format!("output at timestep {t}"),
                    });
                }
                y[t * p + pi] = S::from_f64(yv);
            }
        }
        // Advance the carried state to the end of the chunk.
        let total = log_decay[lc - 1];
        let mut h_next = vec![0.0f64; p * n];
        for (idx, hv) in h_next.iter_mut().enumerate() {
            *hv = total.exp() * h[idx];
        }
        for (s, ts) in (start..end).enumerate() {
            let decay = (total - log_decay[s]).exp();
            let w = decay * input.dt.data()[ts].as_f64();
            let bs = input.b.row(ts);
            for pi in 0..p {
                let xw = w * input.x.at2(ts, pi).as_f64();
                for ni in 0..n {
                    h_next[pi * n + ni] += xw * bs[ni].as_f64();
                }
            }
        }
        h = h_next;
        start = end;
    }
    let final_h = Tensor::new(vec![p, n], h.iter().map(|&v| S::from_f64(v)).collect())?;
    Ok((Tensor::new(vec![t_len, p], y)?, final_h))
}

/// The T×T lower-triangular mixing matrix realizing the scan as `y = M x`.
/// Verification-only: refuses `T > 512`. Assumes zero initial state.
pub fn materialize_mixing_matrix<S: Scalar>(
    b: &Tensor<S>,
    c: &Tensor<S>,
    dt: &Tensor<S>,
    a_log: f64,
    d_skip: f64,
    resets: &[bool],
) -> Result<Tensor<f64>> {
    let (bs, cs, ds) = (b.shape(), c.shape(), dt.shape());
    if bs.len() != 2 || bs != cs || ds != [bs[0]] {
        return Err(CoreError::ShapeMismatch {
            op: "materialize_mixing_matrix",
            details: format!("b {bs:?}, c {cs:?}, dt {ds:?}"),
        });
    }
    let (t_len, n) = (bs[0], bs[1]);
    if t_len > MATERIALIZE_MAX_T {
        return Err(CoreError::contract(format!(
            "materialize_mixing_matrix: T={t_len} exceeds verification limit {MATERIALIZE_MAX_T}"
        )));
    }
    if resets.len() != t_len {
        return Err(CoreError::contract("materialize_mixing_matrix: resets length != T"));
    }
    // Inclusive prefix of log decays; empty products become exp(0).
    let ea = a_log.exp();
    let mut prefix = Vec::with_capacity(t_len);
    let mut cum = 0.0f64;
    for t in 0..t_len {
        cum += -ea * dt.data()[t].as_f64() + if resets[t] { RESET_BIAS } else { 0.0 };
        prefix.push(cum);
    }
    let mut m = vec![0.0f64; t_len * t_len];
    for t in 0..t_len {
        for s in 0..=t {
            let mut cb = 0.0f64;
            for ni in 0..n {
                cb += c.at2(t, ni).as_f64() * b.at2(s, ni).as_f64();
            }
            let decay = (prefix[t] - prefix[s]).exp(); // 1 when s == t
            let mut v = cb * dt.data()[s].as_f64() * decay;
            if s == t {
                v += d_skip;
            }
            m[t * t_len + s] = v;
        }
    }
    Tensor::new(vec![t_len, t_len], m)
}

/// `y = M x` for `x: [T, P]`.
pub fn apply_mixing<S: Scalar>(m: &Tensor<f64>, x: &Tensor<S>) -> Result<Tensor<f64>> {
    let (ms, xs) = (m.shape(), x.shape());
    if ms.len() != 2 || ms[0] != ms[1] || xs.len() != 2 || xs[0] != ms[0] {
        return Err(CoreError::ShapeMismatch {
            op: "apply_mixing",
            details: format!("M {ms:?}, x {xs:?}"),
        });
    }
    let (t_len, p) = (xs[0], xs[1]);
    let mut y = vec![0.0f64; t_len * p];
    for t in 0..t_len {
        for s in 0..=t {
            let coef = m.at2(t, s);
            for pi in 0..p {
                y[t * p + pi] += coef * x.at2(s, pi).as_f64();
            }
        }
    }
    Tensor::new(vec![t_len, p], y)
}

/// Forward-only multi-head scan with explicit initial state; the chunk-wise
/// state-passing simulation builds on this. `x: [T,H,P]`, `b`/`c`: `[T,G,N]`,
/// `dt: [T,H]`, `a_log`/`d_skip`: `[H]`, hidden `[H,P,N]`.
#[allow(clippy::too_many_arguments)]
pub fn multihead_scan<S: Scalar>(
    x: &Tensor<S>,
    b: &Tensor<S>,
    c: &Tensor<S>,
    dt: &Tensor<S>,
    a_log: &Tensor<S>,
    d_skip: &Tensor<S>,
    resets: &[bool],
    hidden: &mut Tensor<S>,
) -> Result<Tensor<S>> {
    let (t_len, h, p) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (g, n) = (b.shape()[1], b.shape()[2]);
    let heads_per_group = h / g;
    let mut y = vec![S::zero(); t_len * h * p];
    for t in 0..t_len {
        for head in 0..h {
            let grp = head / heads_per_group;
            let ea = a_log.data()[head].as_f64().exp();
            let mut la = -ea * dt.at2(t, head).as_f64();
            if resets[t] {
                la += RESET_BIAS;
            }
            let a = S::from_f64(la.exp());
            let dtv = dt.at2(t, head);
            for pi in 0..p {
                let xval = x.at3(t, head, pi);
                let write = dtv * xval;
                let mut acc = d_skip.data()[head] * xval;
                for ni in 0..n {
                    let idx = (head * p + pi) * n + ni;
                    let hv = a * hidden.data()[idx] + write * b.at3(t, grp, ni);
                    hidden.data_mut()[idx] = hv;
                    acc += hv * c.at3(t, grp, ni);
                }
                if !acc.is_finite() {
                    return Err(CoreError::NonFinite {
                        op: "multihead_scan".into(),
                        details: format!("timestep {t}, head {head}"),
                    });
                }
                y[(t * h + head) * p + pi] = acc;
            }
        }
    }
    Tensor::new(vec![t_len, h, p], y)
}
