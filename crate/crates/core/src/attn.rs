//! Grouped-query attention with configurable-base RoPE and cross-document
//! (block-diagonal) masking.
//!
//! There is no hidden softmax temperature: the conventional `1/sqrt(d_head)`
//! factor is folded into the tunable key multiplier, which scales as
//! `d^-2 (d_head)^-1/2` under width transfer. The attention path applies no
//! output RMSnorm.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Rotary embedding parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeSpec {
    pub base: f64,
    pub d_head: usize,
}

/// Frequencies `θ_k = base^(-2k/d_head)` for `k = 0 .. d_head/2 - 1`.
pub fn rope_frequencies(spec: &RopeSpec) -> Result<Vec<f64>> {
    if spec.d_head % 2 != 0 {
        return Err(CoreError::Config(format!("RoPE d_head must be even, got {}", spec.d_head)));
    }
    if spec.base < 1.0 {
        return Err(CoreError::Config(format!("RoPE base must be >= 1, got {}", spec.base)));
    }
    Ok((0..spec.d_head / 2)
        .map(|k| spec.base.powf(-2.0 * k as f64 / spec.d_head as f64))
        .collect())
}

/// Rotate query and key head vectors (`[T, H, d_head]`) by their positions.
pub fn apply_rope<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    positions: &[usize],
    spec: &RopeSpec,
) -> Result<(Var, Var)> {
    let freqs = rope_frequencies(spec)?;
    let q2 = tape.rope(q, positions, &freqs)?;
    let k2 = tape.rope(k, positions, &freqs)?;
    Ok((q2, k2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttnDims {
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl AttnDims {
    pub fn d_attn(&self) -> usize {
        self.n_q_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_q_heads == 0 || self.n_kv_heads == 0 || self.d_head == 0 {
            return Err(CoreError::Config("attention dims must be positive".into()));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(CoreError::Config(format!(
                "query heads {} must be divisible by kv heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnLayerVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnMults {
    pub m_key: f64,
    pub m_attn: f64,
}

/// Attention branch forward on a (pre-normed) stream slice `u: [T, d_model]`.
///
/// Token `t` attends causally within its own document. Keys are scaled by
/// `m_key` before the dot product; the output projection input is scaled by
/// `m_attn`. When `positions` is empty they are derived from `doc_ids`
/// (restarting at 0 per document).
#[allow(clippy::too_many_arguments)]
pub fn gqa_attention<S: Scalar>(
    tape: &mut Tape<S>,
    u: Var,
    vars: &AttnLayerVars,
    dims: &AttnDims,
    rope: &RopeSpec,
    mults: &AttnMults,
    doc_ids: &[u64],
    positions: &[usize],
) -> Result<Var> {
    dims.validate()?;
    let t_len = tape.value(u).shape()[0];
    if doc_ids.len() != t_len {
        return Err(CoreError::contract("gqa_attention: doc_ids length != T"));
    }
    let derived;
    let positions = if positions.is_empty() {
        derived = positions_from_doc_ids(doc_ids);
        &derived
    } else {
        if positions.len() != t_len {
            return Err(CoreError::contract("gqa_attention: positions length != T"));
        }
        positions
    };

    let q = tape.linear(u, vars.w_q)?;
    let k = tape.linear(u, vars.w_k)?;
    let k = tape.scale(k, S::from_f64(mults.m_key));
    let v = tape.linear(u, vars.w_v)?;
    let q3 = tape.reshape(q, &[t_len, dims.n_q_heads, dims.d_head])?;
    let k3 = tape.reshape(k, &[t_len, dims.n_kv_heads, dims.d_head])?;
    let v3 = tape.reshape(v, &[t_len, dims.n_kv_heads, dims.d_head])?;
    let (q3, k3) = apply_rope(tape, q3, k3, positions, rope)?;
    let att = tape.gqa_attention(q3, k3, v3, doc_ids)?;
    let att2 = tape.reshape(att, &[t_len, dims.d_attn()])?;
    let out = tape.linear(att2, vars.w_out)?;
    Ok(tape.scale(out, S::from_f64(mults.m_attn)))
}

/// Positions restarting at 0 at each document boundary.
pub fn positions_from_doc_ids(doc_ids: &[u64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(doc_ids.len());
    let mut start = 0usize;
    for (t, &d) in doc_ids.iter().enumerate() {
        if t == 0 || d != doc_ids[t - 1] {
            start = t;
        }
        out.push(t - start);
    }
    out
}
