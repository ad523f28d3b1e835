//! Model configuration: architecture, channel allocation fractions, and the
//! knobs of both mixers.

use crate::attn::AttnDims;
use crate::error::{CoreError, Result};
use crate::ssm::SsmDims;
use crate::Precision;
use serde::{Deserialize, Serialize};

/// Block arrangement: how the three sub-blocks are composed inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arrangement {
    /// One shared pre-norm, three parallel branches summed into the residual.
    #[serde(rename = "sam")]
    FullyParallel,
    /// SSM and attention in parallel behind a shared norm, then the MLP with
    /// its own norm. The default.
    #[serde(rename = "sa_m")]
    SemiParallel,
    /// Three sequential sub-blocks, each with its own norm.
    #[serde(rename = "s_a_m")]
    FullySequential,
}

impl Arrangement {
    /// RMSnorm gain vectors a block of this arrangement carries.
    pub fn norm_count(self) -> usize {
        match self {
            Arrangement::FullyParallel => 1,
            Arrangement::SemiParallel => 2,
            Arrangement::FullySequential => 3,
        }
    }
}

/// Channel fractions in eighths; must sum to 8 with every part positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelFractions {
    pub ssm_eighths: u8,
    pub attn_eighths: u8,
    pub mlp_eighths: u8,
}

impl ChannelFractions {
    pub fn validate(&self) -> Result<()> {
        if self.ssm_eighths == 0 || self.attn_eighths == 0 || self.mlp_eighths == 0 {
            return Err(CoreError::Config("every channel fraction must be positive".into()));
        }
        if self.ssm_eighths + self.attn_eighths + self.mlp_eighths != 8 {
            return Err(CoreError::Config("channel fractions must sum to 8/8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmConfig {
    pub d_head: usize,
    pub d_state: usize,
    pub n_groups: usize,
    pub conv_k: usize,
    pub chunk_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub rope_base: f64,
}

/// Full architectural description of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub alpha: ChannelFractions,
    /// Base channel counts per full allocation (the 2 : 3 : 2.375 ratio at
    /// the reference width, scaled linearly with `d_model`).
    pub base_s: f64,
    pub base_a: f64,
    pub base_m: f64,
    pub arrangement: Arrangement,
    pub ssm: SsmConfig,
    pub attn: AttnConfig,
    pub precision: Precision,
    pub seed: u64,
}

/// Reference width the base channel counts (4096, 6144, 4864) belong to.
pub const BASE_CHANNEL_REF_WIDTH: f64 = 1280.0;

impl HybridConfig {
    /// Bases scaled linearly with width from (4096, 6144, 4864) at the
    /// reference width.
    pub fn scaled_bases(d_model: usize) -> (f64, f64, f64) {
        let s = d_model as f64 / BASE_CHANNEL_REF_WIDTH;
        (4096.0 * s, 6144.0 * s, 4864.0 * s)
    }

    /// A small config at the given width: 2:1:5 allocation, semi-parallel
    /// arrangement, high-base RoPE.
    pub fn desk(d_model: usize, n_layers: usize, vocab: usize, seed: u64) -> Self {
        let (base_s, base_a, base_m) = Self::scaled_bases(d_model);
        HybridConfig {
            d_model,
            n_layers,
            vocab,
            alpha: ChannelFractions { ssm_eighths: 2, attn_eighths: 1, mlp_eighths: 5 },
            base_s,
            base_a,
            base_m,
            arrangement: Arrangement::SemiParallel,
            ssm: SsmConfig { d_head: 8, d_state: 16, n_groups: 1, conv_k: 4, chunk_size: 16 },
            attn: AttnConfig { n_kv_heads: 2, d_head: 8, rope_base: 1e11 },
            precision: Precision::Verification,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate()?;
        if self.d_model == 0 || self.n_layers == 0 || self.vocab == 0 {
            return Err(CoreError::Config("d_model, n_layers, vocab must be positive".into()));
        }
        Ok(())
    }

    pub fn ssm_dims(&self, d_ssm: usize) -> SsmDims {
        SsmDims {
            d_model: self.d_model,
            n_heads: d_ssm / self.ssm.d_head,
            d_head: self.ssm.d_head,
            d_state: self.ssm.d_state,
            n_groups: self.ssm.n_groups,
            conv_k: self.ssm.conv_k,
            chunk_size: self.ssm.chunk_size,
        }
    }

    pub fn attn_dims(&self, d_attn: usize) -> AttnDims {
        AttnDims {
            d_model: self.d_model,
            n_q_heads: d_attn / self.attn.d_head,
            n_kv_heads: self.attn.n_kv_heads,
            d_head: self.attn.d_head,
        }
    }
}
