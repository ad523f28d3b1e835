//! Data-parallel throughput model: a single optimizer step costs the
//! gradient-accumulation compute plus one synchronization,
//! `T_step = K t_μ + t_sync(N_dp)` with `K = B_g / (N_dp B_μ)`, so
//! throughput `B_g / T_step` deviates from linear scaling as the sync term
//! starts to dominate.

use crate::error::{CoreError, Result};

/// Tokens (or samples) per unit time for a global batch `b_global`, `n_dp`
/// data-parallel workers, micro-batch `b_micro`, per-micro-batch time
/// `t_micro`, and a synchronization-latency model `t_sync(n_dp)`.
pub fn dp_throughput(
    b_global: u64,
    n_dp: u64,
    b_micro: u64,
    t_micro: f64,
    t_sync: &dyn Fn(u64) -> f64,
) -> Result<f64> {
    if n_dp == 0 || b_micro == 0 {
        return Err(CoreError::contract("dp_throughput: n_dp and b_micro must be positive"));
    }
    if t_micro <= 0.0 {
        return Err(CoreError::contract("dp_throughput: t_micro must be positive"));
    }
    if b_global % (n_dp * b_micro) != 0 {
        return Err(CoreError::contract(format!(
            "dp_throughput: global batch {b_global} not divisible by n_dp*b_micro = {}",
            n_dp * b_micro
        )));
    }
    let k = (b_global / (n_dp * b_micro)) as f64;
    Ok(b_global as f64 / (k * t_micro + t_sync(n_dp)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sync_is_perfectly_linear() {
        let th = dp_throughput(4096, 8, 4, 0.5, &|_| 0.0).unwrap();
        assert!((th - 8.0 * 4.0 / 0.5).abs() < 1e-12);
    }

    #[test]
    fn doubling_workers_with_sync_is_sublinear() {
        let sync = |_n: u64| 2.0;
        let t1 = dp_throughput(4096, 8, 4, 0.5, &sync).unwrap();
        let t2 = dp_throughput(4096, 16, 4, 0.5, &sync).unwrap();
        assert!(t2 > t1);
        assert!(t2 < 2.0 * t1, "sync latency prevents perfect doubling");
    }

    #[test]
    fn divisibility_is_enforced() {
        // K = 1 boundary: increasing workers past B_g/B_mu is impossible.
        assert!(dp_throughput(64, 16, 4, 0.5, &|_| 0.0).is_ok()); // K = 1
        assert!(dp_throughput(64, 32, 4, 0.5, &|_| 0.0).is_err());
        assert!(dp_throughput(100, 8, 4, 0.5, &|_| 0.0).is_err());
    }
}
