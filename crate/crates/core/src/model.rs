//! The full model: parameter store, width-aware initialization, forward
//! pass, checkpointing, and the model-level rescaling symmetry.
//!
//! Initialization pairs with the relocated multiplier parametrization: for a
//! matrix layer with fan-in `f` at width ratio `s = d / d_ref`, entries are
//! drawn with `σ = s / sqrt(f)`, so the product `m(d) · σ · sqrt(f)` of a
//! hidden layer is width-independent and activations stay at the same scale
//! across widths. Embedding σ is width-free; unembedding σ is `sqrt(s / d)`.
//! Initialization variances are never tuned.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attn::{AttnDims, AttnLayerVars, AttnMults, RopeSpec};
use crate::block::{
    allocate_channels, block_forward, BlockMults, BlockVars, ChannelAlloc, MlpMults, MlpVars,
    SeqMeta, RMS_EPS,
};
use crate::config::{Arrangement, HybridConfig};
use crate::error::{CoreError, Result};
use crate::mup::{ForwardMult, MatrixGroup, MuPMultiplierSet, ShapeSet, VectorGroup};
use crate::rng::{derive, DetRng};
use crate::scalar::{softplus_inv, Scalar};
use crate::ssm::{DtPolicy, SsmDims, SsmLayerVars, SsmMults};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;


/// Parameter role; determines the optimizer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Emb,
    Unemb,
    MatrixIn,
    MatrixOut,
    MatrixUp,
    MatrixGate,
    MatrixDown,
    NormFinal,
    NormMixer,
    NormMlp,
    NormSsm,
    ConvWeight,
    ConvBias,
    DtBias,
    ALog,
    DSkip,
}

impl ParamKind {
    pub fn matrix_group(self) -> Option<MatrixGroup> {
        match self {
            ParamKind::Emb => Some(MatrixGroup::Emb),
            ParamKind::Unemb => Some(MatrixGroup::Unemb),
            ParamKind::MatrixIn => Some(MatrixGroup::In),
            ParamKind::MatrixOut => Some(MatrixGroup::Out),
            ParamKind::MatrixUp => Some(MatrixGroup::Up),
            ParamKind::MatrixGate => Some(MatrixGroup::Gate),
            ParamKind::MatrixDown => Some(MatrixGroup::Down),
            _ => None,
        }
    }

    pub fn vector_group(self) -> Option<VectorGroup> {
        match self {
            ParamKind::NormFinal => Some(VectorGroup::FinalNorm),
            ParamKind::NormMixer => Some(VectorGroup::MixerNorm),
            ParamKind::NormMlp => Some(VectorGroup::MlpNorm),
            ParamKind::NormSsm => Some(VectorGroup::SsmNorm),
            ParamKind::ConvWeight => Some(VectorGroup::ConvWeight),
            ParamKind::ConvBias => Some(VectorGroup::ConvBias),
            ParamKind::DtBias => Some(VectorGroup::DtBias),
            ParamKind::ALog => Some(VectorGroup::ALog),
            ParamKind::DSkip => Some(VectorGroup::DSkip),
            _ => None,
        }
    }

    pub fn is_matrix(self) -> bool {
        self.matrix_group().is_some()
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

/// Named parameters in a fixed registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: BTreeMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor<S>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, tensor });
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Mean-fashion squared norm per matrix group: `(1/mn) Σ W²`, aggregated
    /// over all tensors of the group.
    pub fn group_mean_square(&self) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let key = format!("{:?}", e.kind);
            let slot = sums.entry(key).or_insert((0.0, 0));
            slot.0 += e.tensor.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            slot.1 += e.tensor.len();
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n.max(1) as f64)).collect()
    }
}

/// Shadow multipliers on projections outside the minimal tunable set (Q, V,
/// up). Unit except under the rescaling symmetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowMults {
    pub m_q: f64,
    pub m_v: f64,
    pub m_up: f64,
}

impl Default for ShadowMults {
    fn default() -> Self {
        ShadowMults { m_q: 1.0, m_v: 1.0, m_up: 1.0 }
    }
}

/// Tape handles for the whole model.
pub struct ModelVars {
    pub emb: Var,
    pub unemb: Var,
    pub final_norm: Var,
    pub layers: Vec<BlockVars>,
}

pub struct HybridModel<S> {
    pub cfg: HybridConfig,
    pub alloc: ChannelAlloc,
    pub mults: MuPMultiplierSet,
    pub shadow: ShadowMults,
    pub params: ParamStore<S>,
}

impl<S: Scalar> HybridModel<S> {
    /// Build and initialize a model; multipliers are transferred from
    /// `base_mults` to this config's shapes.
    pub fn new(cfg: HybridConfig, base_mults: &MuPMultiplierSet) -> Result<Self> {
        let alloc = allocate_channels(&cfg)?;
        let shapes = Self::shape_set(&cfg, &alloc);
        let mults = crate::mup::scale_multipliers(base_mults, shapes);
        let ssm_dims = cfg.ssm_dims(alloc.d_ssm);
        let attn_dims = cfg.attn_dims(alloc.d_attn);
        ssm_dims.validate()?;
        attn_dims.validate()?;

        let mut rng = derive(cfg.seed, 0x494e4954);
        let width_ratio = cfg.d_model as f64 / mults.ref_shapes.d as f64;
        let mut params = ParamStore::new();
        let d = cfg.d_model;

        let hidden = |shape: &[usize], rng: &mut DetRng| -> Tensor<S> {
            let fan_in = shape[1];
            Tensor::randn(shape, width_ratio / (fan_in as f64).sqrt(), rng)
        };

        params.insert("emb", ParamKind::Emb, Tensor::randn(&[cfg.vocab, d], 0.1, &mut rng));
        params.insert(
            "unemb",
            ParamKind::Unemb,
            Tensor::randn(&[cfg.vocab, d], (width_ratio / d as f64).sqrt(), &mut rng),
        );
        params.insert("final_norm", ParamKind::NormFinal, Tensor::full(&[d], S::one()));

        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            params.insert(p("norm_mixer"), ParamKind::NormMixer, Tensor::full(&[d], S::one()));
            if cfg.arrangement == Arrangement::FullySequential {
                params.insert(p("norm_attn"), ParamKind::NormMixer, Tensor::full(&[d], S::one()));
            }
            if cfg.arrangement != Arrangement::FullyParallel {
                params.insert(p("norm_mlp"), ParamKind::NormMlp, Tensor::full(&[d], S::one()));
            }

            let bc = ssm_dims.bc_width();
            params.insert(p("ssm.w_x"), ParamKind::MatrixIn, hidden(&[alloc.d_ssm, d], &mut rng));
            params.insert(p("ssm.w_z"), ParamKind::MatrixIn, hidden(&[alloc.d_ssm, d], &mut rng));
            params.insert(p("ssm.w_b"), ParamKind::MatrixIn, hidden(&[bc, d], &mut rng));
            params.insert(p("ssm.w_c"), ParamKind::MatrixIn, hidden(&[bc, d], &mut rng));
            params.insert(
                p("ssm.w_dt"),
                ParamKind::MatrixIn,
                hidden(&[ssm_dims.n_heads, d], &mut rng),
            );
            let k = ssm_dims.conv_k;
            params.insert(
                p("ssm.conv_w"),
                ParamKind::ConvWeight,
                Tensor::rand_uniform(
                    &[ssm_dims.conv_channels(), k],
                    -1.0 / (k as f64).sqrt(),
                    1.0 / (k as f64).sqrt(),
                    &mut rng,
                ),
            );
            params.insert(
                p("ssm.conv_b"),
                ParamKind::ConvBias,
                Tensor::zeros(&[ssm_dims.conv_channels()]),
            );
            params.insert(
                p("ssm.b_dt"),
                ParamKind::DtBias,
                Tensor::from_f64s(
                    &[ssm_dims.n_heads],
                    &linspace(1e-3, 0.1, ssm_dims.n_heads)
                        .into_iter()
                        .map(softplus_inv)
                        .collect::<Vec<_>>(),
                )?,
            );
            params.insert(
                p("ssm.a_log"),
                ParamKind::ALog,
                Tensor::from_f64s(
                    &[ssm_dims.n_heads],
                    &linspace(1.0, 16.0, ssm_dims.n_heads)
                        .into_iter()
                        .map(f64::ln)
                        .collect::<Vec<_>>(),
                )?,
            );
            params.insert(p("ssm.d_skip"), ParamKind::DSkip, Tensor::full(&[ssm_dims.n_heads], S::one()));
            params.insert(p("ssm.w_out"), ParamKind::MatrixOut, hidden(&[d, alloc.d_ssm], &mut rng));
            params.insert(
                p("ssm.norm"),
                ParamKind::NormSsm,
                Tensor::full(&[alloc.d_ssm], S::one()),
            );

            let kvw = attn_dims.kv_width();
            params.insert(p("attn.w_q"), ParamKind::MatrixIn, hidden(&[alloc.d_attn, d], &mut rng));
            params.insert(p("attn.w_k"), ParamKind::MatrixIn, hidden(&[kvw, d], &mut rng));
            params.insert(p("attn.w_v"), ParamKind::MatrixIn, hidden(&[kvw, d], &mut rng));
            params.insert(p("attn.w_out"), ParamKind::MatrixOut, hidden(&[d, alloc.d_attn], &mut rng));

            params.insert(p("mlp.w_up"), ParamKind::MatrixUp, hidden(&[alloc.d_mlp, d], &mut rng));
            params.insert(p("mlp.w_gate"), ParamKind::MatrixGate, hidden(&[alloc.d_mlp, d], &mut rng));
            params.insert(p("mlp.w_down"), ParamKind::MatrixDown, hidden(&[d, alloc.d_mlp], &mut rng));
        }

        Ok(HybridModel { cfg, alloc, mults, shadow: ShadowMults::default(), params })
    }

    pub fn shape_set(cfg: &HybridConfig, alloc: &ChannelAlloc) -> ShapeSet {
        ShapeSet {
            d: cfg.d_model,
            d_head_ssm: cfg.ssm.d_head,
            n_heads_ssm: alloc.d_ssm / cfg.ssm.d_head,
            d_state: cfg.ssm.d_state,
            n_groups: cfg.ssm.n_groups,
            d_head_attn: cfg.attn.d_head,
            n_q_heads: alloc.d_attn / cfg.attn.d_head,
            d_mlp: alloc.d_mlp,
        }
    }

    pub fn ssm_dims(&self) -> SsmDims {
        self.cfg.ssm_dims(self.alloc.d_ssm)
    }

    pub fn attn_dims(&self) -> AttnDims {
        self.cfg.attn_dims(self.alloc.d_attn)
    }

    pub fn rope_spec(&self) -> RopeSpec {
        RopeSpec { base: self.cfg.attn.rope_base, d_head: self.cfg.attn.d_head }
    }

    pub fn block_mults(&self) -> BlockMults {
        let m = &self.mults;
        BlockMults {
            ssm: SsmMults {
                m_x: m.forward_value(ForwardMult::X),
                m_z: m.forward_value(ForwardMult::Z),
                m_b: m.forward_value(ForwardMult::B),
                m_c: m.forward_value(ForwardMult::C),
                m_dt: m.forward_value(ForwardMult::Dt),
                m_ssm: m.forward_value(ForwardMult::Ssm),
            },
            attn: AttnMults {
                m_key: m.forward_value(ForwardMult::Key),
                m_attn: m.forward_value(ForwardMult::Attn),
            },
            mlp: MlpMults {
                m_gate: m.forward_value(ForwardMult::Gate),
                m_mlp: m.forward_value(ForwardMult::Mlp),
                m_up: self.shadow.m_up,
            },
            m_q: self.shadow.m_q,
            m_v: self.shadow.m_v,
        }
    }

    /// Put every parameter on the tape under its name.
    pub fn register(&self, tape: &mut Tape<S>) -> Result<ModelVars> {
        let mut map: BTreeMap<&str, Var> = BTreeMap::new();
        for e in self.params.entries() {
            map.insert(&e.name, tape.param(e.name.clone(), e.tensor.clone())?);
        }
        let var = |n: &str| -> Var { *map.get(n).expect("registered parameter") };
        let mut layers = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(BlockVars {
                ssm: SsmLayerVars {
                    w_x: var(&p("ssm.w_x")),
                    w_z: var(&p("ssm.w_z")),
                    w_b: var(&p("ssm.w_b")),
                    w_c: var(&p("ssm.w_c")),
                    w_dt: var(&p("ssm.w_dt")),
                    conv_w: var(&p("ssm.conv_w")),
                    conv_b: var(&p("ssm.conv_b")),
                    b_dt: var(&p("ssm.b_dt")),
                    a_log: var(&p("ssm.a_log")),
                    d_skip: var(&p("ssm.d_skip")),
                    w_out: var(&p("ssm.w_out")),
                    rms_gain: var(&p("ssm.norm")),
                },
                attn: AttnLayerVars {
                    w_q: var(&p("attn.w_q")),
                    w_k: var(&p("attn.w_k")),
                    w_v: var(&p("attn.w_v")),
                    w_out: var(&p("attn.w_out")),
                },
                mlp: MlpVars {
                    w_up: var(&p("mlp.w_up")),
                    w_gate: var(&p("mlp.w_gate")),
                    w_down: var(&p("mlp.w_down")),
                },
                norm_mixer: var(&p("norm_mixer")),
                norm_attn: if self.cfg.arrangement == Arrangement::FullySequential {
                    Some(var(&p("norm_attn")))
                } else {
                    None
                },
                norm_mlp: if self.cfg.arrangement != Arrangement::FullyParallel {
                    Some(var(&p("norm_mlp")))
                } else {
                    None
                },
            });
        }
        Ok(ModelVars {
            emb: var("emb"),
            unemb: var("unemb"),
            final_norm: var("final_norm"),
            layers,
        })
    }

    /// Embedding -> blocks -> final norm -> unembedding. Returns logits
    /// `[T, vocab]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        tokens: &[usize],
        meta: &SeqMeta,
        policy: &DtPolicy,
        step: u64,
    ) -> Result<Var> {
        if tokens.len() != meta.resets.len() {
            return Err(CoreError::contract("forward: tokens/meta length mismatch"));
        }
        let ssm_dims = self.ssm_dims();
        let attn_dims = self.attn_dims();
        let rope = self.rope_spec();
        let mults = self.block_mults();
        let e = tape.embedding(vars.emb, tokens)?;
        let mut r = tape.scale(e, S::from_f64(self.mults.forward_value(ForwardMult::Emb)));
        for block in &vars.layers {
            r = block_forward(
                tape,
                r,
                block,
                self.cfg.arrangement,
                &ssm_dims,
                &attn_dims,
                &rope,
                &mults,
                policy,
                step,
                meta,
            )?;
        }
        let n = tape.rms_norm(r, vars.final_norm, 1, RMS_EPS)?;
        let logits = tape.linear(n, vars.unemb)?;
        Ok(tape.scale(logits, S::from_f64(self.mults.forward_value(ForwardMult::Unemb))))
    }

    /// Next-token cross-entropy over one packed row. Targets are the shifted
    /// tokens; the position before a document boundary (and the last
    /// position) has no target.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape<S>,
        vars: &ModelVars,
        tokens: &[usize],
        meta: &SeqMeta,
        policy: &DtPolicy,
        step: u64,
    ) -> Result<Var> {
        let logits = self.forward(tape, vars, tokens, meta, policy, step)?;
        let targets = next_token_targets(tokens, &meta.resets);
        tape.cross_entropy(logits, &targets)
    }

    /// Write updated parameter values back from an external map (used by the
    /// optimizer, which works on the store directly).
    pub fn set_param(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                *slot = t;
                Ok(())
            }
            None => Err(CoreError::contract(format!("unknown parameter {name}"))),
        }
    }

    /// The exact rescaling symmetry at the model level: every matrix
    /// parameter is scaled by `p`, its forward multiplier (including the
    /// shadow Q/V/up multipliers) by `1/p`, matrix LR multipliers by `p`
    /// and matrix WD multipliers by `1/p`. Vector-like parameters are
    /// untouched. Forward outputs and AdamW (ε = 0) trajectories are
    /// invariant.
    pub fn rescale_symmetry(&mut self, p: f64) {
        let ps = S::from_f64(p);
        for e in self.params.entries_mut() {
            if e.kind.is_matrix() {
                for v in e.tensor.data_mut() {
                    *v *= ps;
                }
            }
        }
        for v in self.mults.forward.values_mut() {
            *v /= p;
        }
        for v in self.mults.matrix_lr.values_mut() {
            *v *= p;
        }
        for v in self.mults.matrix_wd.values_mut() {
            *v /= p;
        }
        self.shadow.m_q /= p;
        self.shadow.m_v /= p;
        self.shadow.m_up /= p;
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            config: self.cfg.clone(),
            precision: S::dtype_name().to_string(),
            seed: self.cfg.seed,
            mults: self.mults.clone(),
            shadow: self.shadow,
            params: self
                .params
                .entries()
                .iter()
                .map(|e| ParamMeta {
                    name: e.name.clone(),
                    kind: e.kind,
                    shape: e.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let file = std::fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(file, &manifest)?;
        let mut bytes = Vec::with_capacity(self.params.total_len() * S::BYTES);
        for e in self.params.entries() {
            for &v in e.tensor.data() {
                v.write_le(&mut bytes);
            }
        }
        let mut f = std::fs::File::create(dir.join("params.bin"))?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: CheckpointManifest = serde_json::from_reader(file)?;
        if manifest.precision != S::dtype_name() {
            return Err(CoreError::Checkpoint(format!(
                "precision mismatch: checkpoint {} vs requested {}",
                manifest.precision,
                S::dtype_name()
            )));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join("params.bin"))?.read_to_end(&mut bytes)?;
        let alloc = allocate_channels(&manifest.config)?;
        let mut params = ParamStore::new();
        let mut off = 0usize;
        for meta in &manifest.params {
            let numel: usize = meta.shape.iter().product();
            let need = numel * S::BYTES;
            if off + need > bytes.len() {
                return Err(CoreError::Checkpoint("parameter blob truncated".into()));
            }
            let data: Vec<S> =
                bytes[off..off + need].chunks_exact(S::BYTES).map(S::read_le).collect();
            off += need;
            params.insert(meta.name.clone(), meta.kind, Tensor::new(meta.shape.clone(), data)?);
        }
        if off != bytes.len() {
            return Err(CoreError::Checkpoint("parameter blob has trailing bytes".into()));
        }
        Ok(HybridModel {
            cfg: manifest.config,
            alloc,
            mults: manifest.mults,
            shadow: manifest.shadow,
            params,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: HybridConfig,
    precision: String,
    seed: u64,
    mults: MuPMultiplierSet,
    shadow: ShadowMults,
    params: Vec<ParamMeta>,
}

/// Next-token targets for one packed row: `target[t] = tokens[t+1]`, masked
/// where `t+1` starts a new document or falls off the row.
pub fn next_token_targets(tokens: &[usize], resets: &[bool]) -> Vec<Option<usize>> {
    let t_len = tokens.len();
    (0..t_len)
        .map(|t| {
            if t + 1 < t_len && !resets[t + 1] {
                Some(tokens[t + 1])
            } else {
                None
            }
        })
        .collect()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

