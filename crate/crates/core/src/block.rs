//! Hybrid block assembly: channel allocation across the three sub-blocks,
//! the gated MLP, and the parallel / semi-parallel / sequential arrangements.

use crate::attn::{self, AttnDims, AttnLayerVars, AttnMults, RopeSpec};
use crate::config::{Arrangement, HybridConfig};
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::ssm::{mamba2_block_forward, DtPolicy, SsmDims, SsmLayerVars, SsmMults};
use crate::tape::{Tape, Var};

pub use crate::ssm::RMS_EPS;

/// Result of dividing the inner channels among SSM, attention and MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ChannelAlloc {
    pub d_ssm: usize,
    pub d_attn: usize,
    pub d_mlp: usize,
    /// Channels dropped when rounding down to head multiples, per sub-block.
    /// Logged, never silently redistributed.
    pub remainder_ssm: usize,
    pub remainder_attn: usize,
    pub remainder_mlp: usize,
}

/// `d_ssm = α_S base_S`, `d_attn = α_A base_A`, `d_mlp = α_M base_M`, each
/// rounded down to a multiple of its head width. Attention rounds to
/// `d_head · n_kv_heads` so the grouped-query layout stays valid.
pub fn allocate_channels(cfg: &HybridConfig) -> Result<ChannelAlloc> {
    cfg.validate()?;
    let raw_s = cfg.base_s * cfg.alpha.ssm_eighths as f64 / 8.0;
    let raw_a = cfg.base_a * cfg.alpha.attn_eighths as f64 / 8.0;
    let raw_m = cfg.base_m * cfg.alpha.mlp_eighths as f64 / 8.0;
    let round_down = |raw: f64, multiple: usize| -> (usize, usize) {
        let raw = raw.floor() as usize;
        let alloc = raw / multiple * multiple;
        (alloc, raw - alloc)
    };
    let (d_ssm, rem_s) = round_down(raw_s, cfg.ssm.d_head);
    let (d_attn, rem_a) = round_down(raw_a, cfg.attn.d_head * cfg.attn.n_kv_heads);
    let (d_mlp, rem_m) = round_down(raw_m, 1);
    if d_ssm < cfg.ssm.d_head {
        return Err(CoreError::Config(format!(
            "allocated d_ssm {d_ssm} is below one head ({})",
            cfg.ssm.d_head
        )));
    }
    if d_attn < cfg.attn.d_head * cfg.attn.n_kv_heads {
        return Err(CoreError::Config(format!(
            "allocated d_attn {d_attn} is below one kv group ({})",
            cfg.attn.d_head * cfg.attn.n_kv_heads
        )));
    }
    if d_mlp == 0 {
        return Err(CoreError::Config("allocated d_mlp is zero".into()));
    }
    Ok(ChannelAlloc {
        d_ssm,
        d_attn,
        d_mlp,
        remainder_ssm: rem_s,
        remainder_attn: rem_a,
        remainder_mlp: rem_m,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w_up: Var,
    pub w_gate: Var,
    pub w_down: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpMults {
    pub m_gate: f64,
    pub m_mlp: f64,
    /// Unit by default; participates only in the rescaling symmetry.
    pub m_up: f64,
}

/// Gated MLP: `m_MLP · W_down (SiLU(m_gate W_gate r) ⊙ (W_up r))`.
pub fn mlp_forward<S: Scalar>(
    tape: &mut Tape<S>,
    r: Var,
    vars: &MlpVars,
    mults: &MlpMults,
) -> Result<Var> {
    let gate = tape.linear(r, vars.w_gate)?;
    let gate = tape.scale(gate, S::from_f64(mults.m_gate));
    let gate = tape.silu(gate);
    let up = tape.linear(r, vars.w_up)?;
    let up = if mults.m_up != 1.0 { tape.scale(up, S::from_f64(mults.m_up)) } else { up };
    let prod = tape.mul(gate, up)?;
    let down = tape.linear(prod, vars.w_down)?;
    Ok(tape.scale(down, S::from_f64(mults.m_mlp)))
}

/// Tape handles for one hybrid block. Norm gains present depend on the
/// arrangement: fully parallel carries one, semi-parallel two, fully
/// sequential three.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ssm: SsmLayerVars,
    pub attn: AttnLayerVars,
    pub mlp: MlpVars,
    pub norm_mixer: Var,
    /// Second mixer norm, fully sequential only (attention's own norm).
    pub norm_attn: Option<Var>,
    /// MLP norm, semi-parallel and fully sequential.
    pub norm_mlp: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockMults {
    pub ssm: SsmMults,
    pub attn: AttnMults,
    pub mlp: MlpMults,
    /// Unit shadows on the un-multiplied projections (Q, V); only the
    /// rescaling symmetry moves them.
    pub m_q: f64,
    pub m_v: f64,
}

/// Per-sequence metadata for one packed row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqMeta {
    pub resets: Vec<bool>,
    pub doc_ids: Vec<u64>,
    pub positions: Vec<usize>,
}

impl SeqMeta {
    /// Derive doc ids and positions from reset flags alone.
    pub fn from_resets(resets: Vec<bool>) -> Self {
        let mut doc_ids = Vec::with_capacity(resets.len());
        let mut positions = Vec::with_capacity(resets.len());
        let mut doc = 0u64;
        let mut pos = 0usize;
        for (t, &r) in resets.iter().enumerate() {
            if r && t > 0 {
                doc += 1;
            }
            if r {
                pos = 0;
            }
            doc_ids.push(doc);
            positions.push(pos);
            pos += 1;
        }
        SeqMeta { resets, doc_ids, positions }
    }

    pub fn single_doc(t_len: usize) -> Self {
        let mut resets = vec![false; t_len];
        if t_len > 0 {
            resets[0] = true;
        }
        Self::from_resets(resets)
    }
}

struct Branches<'a, S: Scalar> {
    tape: &'a mut Tape<S>,
    ssm_dims: &'a SsmDims,
    attn_dims: &'a AttnDims,
    rope: &'a RopeSpec,
    mults: &'a BlockMults,
    policy: &'a DtPolicy,
    step: u64,
    meta: &'a SeqMeta,
}

impl<'a, S: Scalar> Branches<'a, S> {
    fn ssm(&mut self, n: Var, vars: &BlockVars) -> Result<Var> {
        mamba2_block_forward(
            self.tape,
            n,
            &vars.ssm,
            self.ssm_dims,
            &self.mults.ssm,
            self.policy,
            self.step,
            &self.meta.resets,
        )
    }

    fn attn(&mut self, n: Var, vars: &BlockVars) -> Result<Var> {
        let q_scaled = ScaledAttn { inner: vars.attn, m_q: self.mults.m_q, m_v: self.mults.m_v };
        q_scaled.forward(
            self.tape,
            n,
            self.attn_dims,
            self.rope,
            &self.mults.attn,
            &self.meta.doc_ids,
            &self.meta.positions,
        )
    }

    fn mlp(&mut self, n: Var, vars: &BlockVars) -> Result<Var> {
        mlp_forward(self.tape, n, &vars.mlp, &self.mults.mlp)
    }
}

/// Attention branch with the shadow Q/V multipliers applied when they are
/// not unit (they are unit everywhere except under the rescaling symmetry).
struct ScaledAttn {
    inner: AttnLayerVars,
    m_q: f64,
    m_v: f64,
}

impl ScaledAttn {
    #[allow(clippy::too_many_arguments)]
    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        u: Var,
        dims: &AttnDims,
        rope: &RopeSpec,
        mults: &AttnMults,
        doc_ids: &[u64],
        positions: &[usize],
    ) -> Result<Var> {
        if self.m_q == 1.0 && self.m_v == 1.0 {
            return attn::gqa_attention(tape, u, &self.inner, dims, rope, mults, doc_ids, positions);
        }
        dims.validate()?;
        let t_len = tape.value(u).shape()[0];
        let q = tape.linear(u, self.inner.w_q)?;
        let q = tape.scale(q, S::from_f64(self.m_q));
        let k = tape.linear(u, self.inner.w_k)?;
        let k = tape.scale(k, S::from_f64(mults.m_key));
        let v = tape.linear(u, self.inner.w_v)?;
        let v = tape.scale(v, S::from_f64(self.m_v));
        let q3 = tape.reshape(q, &[t_len, dims.n_q_heads, dims.d_head])?;
        let k3 = tape.reshape(k, &[t_len, dims.n_kv_heads, dims.d_head])?;
        let v3 = tape.reshape(v, &[t_len, dims.n_kv_heads, dims.d_head])?;
        let (q3, k3) = attn::apply_rope(tape, q3, k3, positions, rope)?;
        let att = tape.gqa_attention(q3, k3, v3, doc_ids)?;
        let att2 = tape.reshape(att, &[t_len, dims.d_attn()])?;
        let out = tape.linear(att2, self.inner.w_out)?;
        Ok(tape.scale(out, S::from_f64(mults.m_attn)))
    }
}

/// One hybrid block on the residual stream.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    r: Var,
    vars: &BlockVars,
    arrangement: Arrangement,
    ssm_dims: &SsmDims,
    attn_dims: &AttnDims,
    rope: &RopeSpec,
    mults: &BlockMults,
    policy: &DtPolicy,
    step: u64,
    meta: &SeqMeta,
) -> Result<Var> {
    let mut br =
        Branches { tape, ssm_dims, attn_dims, rope, mults, policy, step, meta };
    match arrangement {
        Arrangement::FullyParallel => {
            let n = br.tape.rms_norm(r, vars.norm_mixer, 1, RMS_EPS)?;
            let s = br.ssm(n, vars)?;
            let a = br.attn(n, vars)?;
            let m = br.mlp(n, vars)?;
            let sa = br.tape.add(s, a)?;
            let sam = br.tape.add(sa, m)?;
            br.tape.add(r, sam)
        }
        Arrangement::SemiParallel => {
            let n = br.tape.rms_norm(r, vars.norm_mixer, 1, RMS_EPS)?;
            let s = br.ssm(n, vars)?;
            let a = br.attn(n, vars)?;
            let sa = br.tape.add(s, a)?;
            let r1 = br.tape.add(r, sa)?;
            let norm_mlp = vars.norm_mlp.expect("semi-parallel block requires an MLP norm");
            let n2 = br.tape.rms_norm(r1, norm_mlp, 1, RMS_EPS)?;
            let m = br.mlp(n2, vars)?;
            br.tape.add(r1, m)
        }
        Arrangement::FullySequential => {
            let n = br.tape.rms_norm(r, vars.norm_mixer, 1, RMS_EPS)?;
            let s = br.ssm(n, vars)?;
            let r1 = br.tape.add(r, s)?;
            let norm_attn = vars.norm_attn.expect("sequential block requires an attention norm");
            let n2 = br.tape.rms_norm(r1, norm_attn, 1, RMS_EPS)?;
            let a = br.attn(n2, vars)?;
            let r2 = br.tape.add(r1, a)?;
            let norm_mlp = vars.norm_mlp.expect("sequential block requires an MLP norm");
            let n3 = br.tape.rms_norm(r2, norm_mlp, 1, RMS_EPS)?;
            let m = br.mlp(n3, vars)?;
            br.tape.add(r2, m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ChannelFractions;

    fn cfg_with(alpha: (u8, u8, u8)) -> HybridConfig {
        let mut cfg = HybridConfig::desk(64, 1, 64, 0);
        cfg.alpha = ChannelFractions {
            ssm_eighths: alpha.0,
            attn_eighths: alpha.1,
            mlp_eighths: alpha.2,
        };
        // The reference bases, verbatim.
        cfg.base_s = 4096.0;
        cfg.base_a = 6144.0;
        cfg.base_m = 4864.0;
        cfg.ssm.d_head = 64;
        cfg.attn.d_head = 64;
        cfg.attn.n_kv_heads = 2;
        cfg
    }

    #[test]
    fn allocation_optimum_partition() {
        // (2/8, 1/8, 5/8) on (4096, 6144, 4864) gives (1024, 768, 3040).
        let alloc = allocate_channels(&cfg_with((2, 1, 5))).unwrap();
        assert_eq!((alloc.d_ssm, alloc.d_attn, alloc.d_mlp), (1024, 768, 3040));
        assert_eq!(alloc.remainder_ssm + alloc.remainder_attn + alloc.remainder_mlp, 0);
    }

    #[test]
    fn allocation_min_ssm_partition() {
        let alloc = allocate_channels(&cfg_with((1, 1, 6))).unwrap();
        assert_eq!((alloc.d_ssm, alloc.d_attn, alloc.d_mlp), (512, 768, 3648));
    }

    #[test]
    fn base_ratio_balances_matrix_parameters() {
        // Matrix parameters scale as 3 d_ssm d, 2 d_attn d, 3 d_mlp d; the
        // 2 : 3 : 2.375 base ratio keeps the token-mixing parameter counts
        // equal and biases the MLP slightly above parity.
        let (s, a, m) = (4096.0, 6144.0, 4864.0);
        assert_eq!(s / 2048.0, 2.0);
        assert_eq!(a / 2048.0, 3.0);
        assert_eq!(m / 2048.0, 2.375);
        assert_eq!(3.0 * s, 2.0 * a);
        assert!(3.0 * m > 3.0 * s);
    }

    #[test]
    fn allocation_below_one_head_rejected() {
        let mut cfg = cfg_with((1, 1, 6));
        cfg.base_s = 63.0 * 8.0; // raw d_ssm = 63 < one 64-wide head
        assert!(allocate_channels(&cfg).is_err());
    }

    #[test]
    fn fractions_must_sum_to_one() {
        let cfg = cfg_with((2, 2, 5));
        assert!(allocate_channels(&cfg).is_err());
    }

    #[test]
    fn norm_counts_per_arrangement() {
        assert_eq!(Arrangement::FullyParallel.norm_count(), 1);
        assert_eq!(Arrangement::SemiParallel.norm_count(), 2);
        assert_eq!(Arrangement::FullySequential.norm_count(), 3);
    }

    #[test]
    fn seq_meta_from_resets() {
        let meta = SeqMeta::from_resets(vec![true, false, false, true, false]);
        assert_eq!(meta.doc_ids, vec![0, 0, 0, 1, 1]);
        assert_eq!(meta.positions, vec![0, 1, 2, 0, 1]);
    }
}
