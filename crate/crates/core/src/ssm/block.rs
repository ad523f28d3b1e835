//! The full Mamba2 block: input transform with forward multipliers, causal
//! depthwise convolution, dt activation and policy, selective scan, gating,
//! grouped RMSnorm and output projection.

use super::scan::SsmState;
use super::DtPolicy;
use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// RMSnorm epsilon used throughout the model.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SsmDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_state: usize,
    pub n_groups: usize,
    pub conv_k: usize,
    /// Chunk size used by the state-passing schedule; power of two by
    /// convention.
    pub chunk_size: usize,
}

impl SsmDims {
    pub fn d_ssm(&self) -> usize {
        self.n_heads * self.d_head
    }

    /// Channels that pass through the convolution: x, then B, then C.
    pub fn conv_channels(&self) -> usize {
        self.d_ssm() + 2 * self.n_groups * self.d_state
    }

    pub fn bc_width(&self) -> usize {
        self.n_groups * self.d_state
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 || self.d_state == 0 {
            return Err(CoreError::Config("ssm dims must be positive".into()));
        }
        if self.n_groups == 0 || self.n_heads % self.n_groups != 0 {
            return Err(CoreError::Config(format!(
                "group count {} must divide head count {}",
                self.n_groups, self.n_heads
            )));
        }
        if self.conv_k < 1 {
            return Err(CoreError::Config("conv width must be >= 1".into()));
        }
        if self.chunk_size < 1 {
            return Err(CoreError::Config("chunk size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tape handles for one layer's SSM parameters.
#[derive(Debug, Clone, Copy)]
pub struct SsmLayerVars {
    pub w_x: Var,
    pub w_z: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_dt: Var,
    pub conv_w: Var,
    pub conv_b: Var,
    pub b_dt: Var,
    pub a_log: Var,
    pub d_skip: Var,
    pub w_out: Var,
    pub rms_gain: Var,
}

/// Forward multipliers feeding the SSM branch.
#[derive(Debug, Clone, Copy)]
pub struct SsmMults {
    pub m_x: f64,
    pub m_z: f64,
    pub m_b: f64,
    pub m_c: f64,
    pub m_dt: f64,
    pub m_ssm: f64,
}

/// SSM branch forward on a (pre-normed) stream slice `u: [T, d_model]`.
/// Zero initial state; the whole packed row is one scan.
#[allow(clippy::too_many_arguments)]
pub fn mamba2_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    u: Var,
    vars: &SsmLayerVars,
    dims: &SsmDims,
    mults: &SsmMults,
    policy: &DtPolicy,
    step: u64,
    resets: &[bool],
) -> Result<Var> {
    let (y, _) =
        mamba2_block_forward_stateful(tape, u, vars, dims, mults, policy, step, resets, None)?;
    Ok(y)
}

/// [`mamba2_block_forward`] continuing from a carried [`SsmState`]: the
/// hidden state seeds the scan and the conv tail supplies the last `k-1`
/// pre-conv rows from the left neighbour. Returns the output and the state
/// to hand to the next chunk.
#[allow(clippy::too_many_arguments)]
pub fn mamba2_block_forward_stateful<S: Scalar>(
    tape: &mut Tape<S>,
    u: Var,
    vars: &SsmLayerVars,
    dims: &SsmDims,
    mults: &SsmMults,
    policy: &DtPolicy,
    step: u64,
    resets: &[bool],
    state: Option<&SsmState<S>>,
) -> Result<(Var, SsmState<S>)> {
    dims.validate()?;
    policy.validate()?;
    let t_len = tape.value(u).shape()[0];
    if resets.len() != t_len {
        return Err(CoreError::contract("mamba2_block_forward: resets length != T"));
    }
    let d_ssm = dims.d_ssm();
    let bc = dims.bc_width();
    let k = dims.conv_k;

    let x_pre = tape.linear(u, vars.w_x)?;
    let x_pre = tape.scale(x_pre, S::from_f64(mults.m_x));
    let z_pre = tape.linear(u, vars.w_z)?;
    let z_pre = tape.scale(z_pre, S::from_f64(mults.m_z));
    let b_pre = tape.linear(u, vars.w_b)?;
    let b_pre = tape.scale(b_pre, S::from_f64(mults.m_b));
    let c_pre = tape.linear(u, vars.w_c)?;
    let c_pre = tape.scale(c_pre, S::from_f64(mults.m_c));
    let dt_pre = tape.linear(u, vars.w_dt)?;
    let dt_pre = tape.scale(dt_pre, S::from_f64(mults.m_dt));

    // Prepend the valid conv-tail rows from the left neighbour so the causal
    // window is continuous across the chunk boundary.
    let tail_rows = state.map(|s| s.tail_valid).unwrap_or(0).min(k.saturating_sub(1));
    let (x_in, b_in, c_in, ext_resets) = if tail_rows > 0 {
        let st = state.unwrap();
        let full = st.conv_tail.shape()[0];
        let take = |lo: usize, w: usize| -> Result<Tensor<S>> {
            let mut data = Vec::with_capacity(tail_rows * w);
            for r in full - tail_rows..full {
                let row = st.conv_tail.row(r);
                data.extend_from_slice(&row[lo..lo + w]);
            }
            Tensor::new(vec![tail_rows, w], data)
        };
        let xt = tape.constant(take(0, d_ssm)?);
        let bt = tape.constant(take(d_ssm, bc)?);
        let ct = tape.constant(take(d_ssm + bc, bc)?);
        let mut ext = vec![false; tail_rows];
        ext.extend_from_slice(resets);
        (
            tape.concat_rows(xt, x_pre)?,
            tape.concat_rows(bt, b_pre)?,
            tape.concat_rows(ct, c_pre)?,
            ext,
        )
    } else {
        (x_pre, b_pre, c_pre, resets.to_vec())
    };

    // Depthwise conv over the concatenated x|B|C channels, realized as three
    // convolutions on kernel slices.
    let w_x_k = tape.narrow(vars.conv_w, 0, d_ssm)?;
    let w_b_k = tape.narrow(vars.conv_w, d_ssm, bc)?;
    let w_c_k = tape.narrow(vars.conv_w, d_ssm + bc, bc)?;
    let b_x_k = tape.narrow(vars.conv_b, 0, d_ssm)?;
    let b_b_k = tape.narrow(vars.conv_b, d_ssm, bc)?;
    let b_c_k = tape.narrow(vars.conv_b, d_ssm + bc, bc)?;
    let x_conv = tape.conv1d_causal(x_in, w_x_k, b_x_k, &ext_resets)?;
    let b_conv = tape.conv1d_causal(b_in, w_b_k, b_b_k, &ext_resets)?;
    let c_conv = tape.conv1d_causal(c_in, w_c_k, b_c_k, &ext_resets)?;
    let x_conv = tape.narrow(x_conv, tail_rows, t_len)?;
    let b_conv = tape.narrow(b_conv, tail_rows, t_len)?;
    let c_conv = tape.narrow(c_conv, tail_rows, t_len)?;
    let x_act = tape.silu(x_conv);
    let b_act = tape.silu(b_conv);
    let c_act = tape.silu(c_conv);

    // dt = Softplus(d̃t + b_dt), then the mitigation policy.
    let dt_raw = tape.add_row(dt_pre, vars.b_dt)?;
    let dt_act = tape.softplus(dt_raw);
    let dt_eff = match *policy {
        DtPolicy::None => dt_act,
        DtPolicy::ClipPositive { dt_max } => tape.clamp_max(dt_act, S::from_f64(dt_max)),
        DtPolicy::Attenuate { alpha, k_steps } => {
            if step <= k_steps {
                tape.scale(dt_act, S::from_f64(alpha))
            } else {
                dt_act
            }
        }
    };

    let x3 = tape.reshape(x_act, &[t_len, dims.n_heads, dims.d_head])?;
    let b3 = tape.reshape(b_act, &[t_len, dims.n_groups, dims.d_state])?;
    let c3 = tape.reshape(c_act, &[t_len, dims.n_groups, dims.d_state])?;
    let (y3, final_hidden) = tape.ssm_scan_from(
        x3,
        b3,
        c3,
        dt_eff,
        vars.a_log,
        vars.d_skip,
        resets,
        state.map(|s| &s.hidden),
    )?;
    let y = tape.reshape(y3, &[t_len, d_ssm])?;

    let gate = tape.silu(z_pre);
    let gated = tape.mul(y, gate)?;
    let normed = tape.rms_norm(gated, vars.rms_gain, dims.n_groups, RMS_EPS)?;
    let out = tape.linear(normed, vars.w_out)?;
    let out = tape.scale(out, S::from_f64(mults.m_ssm));

    // Assemble the next conv tail from this chunk's pre-conv rows (tail rows
    // from the previous state fill in when the chunk is shorter than k-1).
    let tail_len = k.saturating_sub(1);
    let mut tail = Tensor::zeros(&[tail_len, dims.conv_channels()]);
    let mut rows: Vec<Vec<S>> = Vec::new();
    if let Some(st) = state {
        let full = st.conv_tail.shape()[0];
        for r in full - tail_rows..full {
            rows.push(st.conv_tail.row(r).to_vec());
        }
    }
    for t in 0..t_len {
        let mut row = Vec::with_capacity(dims.conv_channels());
        row.extend_from_slice(tape.value(x_pre).row(t));
        row.extend_from_slice(tape.value(b_pre).row(t));
        row.extend_from_slice(tape.value(c_pre).row(t));
        rows.push(row);
    }
    let keep = rows.len().min(tail_len);
    for (i, row) in rows[rows.len() - keep..].iter().enumerate() {
        let dst = (tail_len - keep + i) * dims.conv_channels();
        tail.data_mut()[dst..dst + dims.conv_channels()].copy_from_slice(row);
    }
    let since_reset = match resets.iter().rposition(|&r| r) {
        Some(idx) => t_len - idx,
        None => state.map(|s| s.tail_valid).unwrap_or(0) + t_len,
    };
    let new_state = SsmState {
        hidden: final_hidden,
        conv_tail: tail,
        tail_valid: since_reset.min(tail_len),
    };
    Ok((out, new_state))
}

/// Sequential simulation of the chunk-wise state-passing schedule: the
/// sequence is processed in chunks, each continuing from its left
/// neighbour's hidden state and conv tail. Output must match the unchunked
/// forward.
#[allow(clippy::too_many_arguments)]
pub fn ssm_block_state_passing<S: Scalar>(
    tape: &mut Tape<S>,
    u: Var,
    vars: &SsmLayerVars,
    dims: &SsmDims,
    mults: &SsmMults,
    policy: &DtPolicy,
    step: u64,
    resets: &[bool],
    chunk_len: usize,
) -> Result<Tensor<S>> {
    if chunk_len == 0 {
        return Err(CoreError::contract("state passing: chunk_len must be >= 1"));
    }
    let t_len = tape.value(u).shape()[0];
    let mut state = SsmState::zeros(
        dims.n_heads,
        dims.d_head,
        dims.d_state,
        dims.conv_k,
        dims.conv_channels(),
    );
    let mut out = Vec::with_capacity(t_len * dims.d_model);
    let mut start = 0;
    while start < t_len {
        let len = chunk_len.min(t_len - start);
        let u_chunk = tape.narrow(u, start, len)?;
        let (y, next) = mamba2_block_forward_stateful(
            tape,
            u_chunk,
            vars,
            dims,
            mults,
            policy,
            step,
            &resets[start..start + len],
            Some(&state),
        )?;
        out.extend_from_slice(tape.value(y).data());
        state = next;
        start += len;
    }
    Tensor::new(vec![t_len, dims.d_model], out)
}
