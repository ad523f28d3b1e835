//! The tunable-multiplier parametrization: 35 multipliers (12 forward, 7
//! matrix ELR, 7 matrix EWD, 9 vector LR), their width-scaling transfer
//! laws, the exact rescaling symmetry, and the stagewise micro-sweep tuner
//! with sensitivity estimation.
//!
//! Width scaling is relocated entirely into the forward multipliers: learning
//! rate and weight decay multipliers do not change with model size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Forward multipliers `y = m · W · x`. The minimal set: query and value
/// scalings are redundant given the key and output multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ForwardMult {
    Emb,
    Unemb,
    Mlp,
    Attn,
    Ssm,
    Gate,
    Key,
    X,
    Z,
    B,
    C,
    Dt,
}

pub const FORWARD_MULTS: [ForwardMult; 12] = [
    ForwardMult::Emb,
    ForwardMult::Unemb,
    ForwardMult::Mlp,
    ForwardMult::Attn,
    ForwardMult::Ssm,
    ForwardMult::Gate,
    ForwardMult::Key,
    ForwardMult::X,
    ForwardMult::Z,
    ForwardMult::B,
    ForwardMult::C,
    ForwardMult::Dt,
];

/// Weight-decayed matrix parameter groups. `In` merges every input
/// projection of both mixers (x, z, B, C, dt, Q, K, V); `Out` merges the two
/// mixer output projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatrixGroup {
    Emb,
    Unemb,
    In,
    Out,
    Up,
    Gate,
    Down,
}

pub const MATRIX_GROUPS: [MatrixGroup; 7] = [
    MatrixGroup::Emb,
    MatrixGroup::Unemb,
    MatrixGroup::In,
    MatrixGroup::Out,
    MatrixGroup::Up,
    MatrixGroup::Gate,
    MatrixGroup::Down,
];

/// Vector-like parameter groups: learning-rate multiplier only, weight decay
/// disabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VectorGroup {
    FinalNorm,
    MixerNorm,
    MlpNorm,
    SsmNorm,
    ConvWeight,
    ConvBias,
    DtBias,
    ALog,
    DSkip,
}

pub const VECTOR_GROUPS: [VectorGroup; 9] = [
    VectorGroup::FinalNorm,
    VectorGroup::MixerNorm,
    VectorGroup::MlpNorm,
    VectorGroup::SsmNorm,
    VectorGroup::ConvWeight,
    VectorGroup::ConvBias,
    VectorGroup::DtBias,
    VectorGroup::ALog,
    VectorGroup::DSkip,
];

/// One of the 35 tunables. Matrix learning rate and weight decay are tuned
/// in the effective (ELR/EWD) coordinates, which are close to orthogonal on
/// log-scale grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MultiplierId {
    Forward(ForwardMult),
    Elr(MatrixGroup),
    Ewd(MatrixGroup),
    VectorLr(VectorGroup),
}

/// All 35 tunables in a fixed sweep order.
pub fn all_multiplier_ids() -> Vec<MultiplierId> {
    let mut out = Vec::with_capacity(35);
    out.extend(FORWARD_MULTS.iter().map(|&f| MultiplierId::Forward(f)));
    out.extend(MATRIX_GROUPS.iter().map(|&g| MultiplierId::Elr(g)));
    out.extend(MATRIX_GROUPS.iter().map(|&g| MultiplierId::Ewd(g)));
    out.extend(VECTOR_GROUPS.iter().map(|&g| MultiplierId::VectorLr(g)));
    out
}

/// The model dimensions entering the width-scaling laws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSet {
    pub d: usize,
    pub d_head_ssm: usize,
    pub n_heads_ssm: usize,
    pub d_state: usize,
    pub n_groups: usize,
    pub d_head_attn: usize,
    pub n_q_heads: usize,
    pub d_mlp: usize,
}

impl ShapeSet {
    /// Base-model shapes the tuned multipliers were obtained at.
    pub fn reference() -> Self {
        ShapeSet {
            d: 1280,
            d_head_ssm: 64,
            n_heads_ssm: 16,
            d_state: 128,
            n_groups: 1,
            d_head_attn: 64,
            n_q_heads: 12,
            d_mlp: 3840,
        }
    }
}

impl ForwardMult {
    /// Width-transfer factor from `r` to `t`: `m(t) = m(r) · factor`.
    /// m_emb is width-free; m_unemb, m_gate, m_x, m_z, m_C, m_dt go as
    /// `d^-1`; m_MLP as `(d_mlp d)^-1`; m_attn as `(d_head n_q d)^-1`;
    /// m_SSM as `(d_head n_heads)^-1`; m_key as `d^-2 d_head^-1/2`; m_B as
    /// `(d_state n_groups d)^-1`.
    pub fn scale_factor(self, r: &ShapeSet, t: &ShapeSet) -> f64 {
        let d = r.d as f64 / t.d as f64;
        match self {
            ForwardMult::Emb => 1.0,
            ForwardMult::Unemb | ForwardMult::Gate => d,
            ForwardMult::X | ForwardMult::Z | ForwardMult::C | ForwardMult::Dt => d,
            ForwardMult::Mlp => (r.d_mlp as f64 * r.d as f64) / (t.d_mlp as f64 * t.d as f64),
            ForwardMult::Attn => {
                (r.d_head_attn as f64 * r.n_q_heads as f64 * r.d as f64)
                    / (t.d_head_attn as f64 * t.n_q_heads as f64 * t.d as f64)
            }
            ForwardMult::Ssm => {
                (r.d_head_ssm as f64 * r.n_heads_ssm as f64)
                    / (t.d_head_ssm as f64 * t.n_heads_ssm as f64)
            }
            ForwardMult::Key => d * d * (r.d_head_attn as f64 / t.d_head_attn as f64).sqrt(),
            ForwardMult::B => {
                (r.d_state as f64 * r.n_groups as f64 * r.d as f64)
                    / (t.d_state as f64 * t.n_groups as f64 * t.d as f64)
            }
        }
    }
}

/// The 35 tunables plus their width-scaling metadata.
///
/// Tuned values are stored at the reference shapes; forward values at the
/// current shapes are always recomputed directly from the reference, so
/// transfer composes exactly: scaling to `d1` and then to `d2` is bit-equal
/// to scaling straight to `d2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuPMultiplierSet {
    pub forward: BTreeMap<ForwardMult, f64>,
    pub matrix_lr: BTreeMap<MatrixGroup, f64>,
    pub matrix_wd: BTreeMap<MatrixGroup, f64>,
    pub vector_lr: BTreeMap<VectorGroup, f64>,
    pub ref_shapes: ShapeSet,
    pub shapes: ShapeSet,
}

impl MuPMultiplierSet {
    /// The tuned base-model multipliers (powers of two).
    pub fn base() -> Self {
        let p = |e: f64| 2f64.powf(e);
        let forward = BTreeMap::from([
            (ForwardMult::Emb, p(2.5)),
            (ForwardMult::Unemb, p(-5.0)),
            (ForwardMult::Mlp, p(-2.0)),
            (ForwardMult::Attn, p(-1.0)),
            (ForwardMult::Ssm, p(-1.5)),
            (ForwardMult::Gate, p(-0.5)),
            (ForwardMult::Key, p(-2.0)),
            (ForwardMult::X, p(-2.0)),
            (ForwardMult::Z, p(-1.5)),
            (ForwardMult::B, p(-1.5)),
            (ForwardMult::C, p(-1.0)),
            (ForwardMult::Dt, p(-1.5)),
        ]);
        let matrix_lr = BTreeMap::from([
            (MatrixGroup::Emb, p(2.0)),
            (MatrixGroup::Unemb, p(0.0)),
            (MatrixGroup::In, p(-0.5)),
            (MatrixGroup::Out, p(-2.0)),
            (MatrixGroup::Up, p(-0.5)),
            (MatrixGroup::Gate, p(0.5)),
            (MatrixGroup::Down, p(-0.5)),
        ]);
        let matrix_wd = BTreeMap::from([
            (MatrixGroup::Emb, p(-3.0)),
            (MatrixGroup::Unemb, p(-2.0)),
            (MatrixGroup::In, p(0.5)),
            (MatrixGroup::Out, p(2.0)),
            (MatrixGroup::Up, p(-0.5)),
            (MatrixGroup::Gate, p(0.0)),
            (MatrixGroup::Down, p(-0.5)),
        ]);
        let vector_lr = BTreeMap::from([
            (VectorGroup::FinalNorm, p(1.5)),
            (VectorGroup::MixerNorm, p(2.0)),
            (VectorGroup::MlpNorm, p(1.5)),
            (VectorGroup::SsmNorm, p(1.0)),
            (VectorGroup::ConvWeight, p(2.5)),
            (VectorGroup::ConvBias, p(1.0)),
            (VectorGroup::DtBias, p(1.5)),
            (VectorGroup::ALog, p(1.5)),
            (VectorGroup::DSkip, p(3.0)),
        ]);
        let shapes = ShapeSet::reference();
        MuPMultiplierSet {
            forward,
            matrix_lr,
            matrix_wd,
            vector_lr,
            ref_shapes: shapes,
            shapes,
        }
    }

    /// Unit multipliers at the given shapes, useful for isolated tests.
    pub fn unit(shapes: ShapeSet) -> Self {
        let forward = FORWARD_MULTS.iter().map(|&f| (f, 1.0)).collect();
        let matrix_lr = MATRIX_GROUPS.iter().map(|&g| (g, 1.0)).collect();
        let matrix_wd = MATRIX_GROUPS.iter().map(|&g| (g, 1.0)).collect();
        let vector_lr = VECTOR_GROUPS.iter().map(|&g| (g, 1.0)).collect();
        MuPMultiplierSet {
            forward,
            matrix_lr,
            matrix_wd,
            vector_lr,
            ref_shapes: shapes,
            shapes,
        }
    }

    pub fn tunable_count(&self) -> usize {
        self.forward.len() + self.matrix_lr.len() + self.matrix_wd.len() + self.vector_lr.len()
    }

    /// Forward multiplier value at the current shapes.
    pub fn forward_value(&self, m: ForwardMult) -> f64 {
        self.forward[&m] * m.scale_factor(&self.ref_shapes, &self.shapes)
    }

    /// LR multipliers do not scale with width (the relocated parametrization
    /// keeps global learning rate and weight decay fixed across sizes).
    pub fn matrix_lr_value(&self, g: MatrixGroup) -> f64 {
        self.matrix_lr[&g]
    }

    pub fn matrix_wd_value(&self, g: MatrixGroup) -> f64 {
        self.matrix_wd[&g]
    }

    pub fn vector_lr_value(&self, g: VectorGroup) -> f64 {
        self.vector_lr[&g]
    }

    /// The value of one tunable in its sweep coordinate.
    pub fn coordinate(&self, id: MultiplierId) -> f64 {
        match id {
            MultiplierId::Forward(f) => self.forward[&f],
            MultiplierId::Elr(g) => (self.matrix_lr[&g] * self.matrix_wd[&g]).sqrt(),
            MultiplierId::Ewd(g) => (self.matrix_wd[&g] / self.matrix_lr[&g]).sqrt(),
            MultiplierId::VectorLr(g) => self.vector_lr[&g],
        }
    }

    /// Multiply one tunable coordinate by `factor`. ELR moves (lr, wd)
    /// jointly; EWD trades them against each other, leaving ELR unchanged.
    pub fn with_coordinate_scaled(&self, id: MultiplierId, factor: f64) -> Self {
        let mut next = self.clone();
        match id {
            MultiplierId::Forward(f) => {
                *next.forward.get_mut(&f).expect("forward key") *= factor;
            }
            MultiplierId::Elr(g) => {
                *next.matrix_lr.get_mut(&g).expect("lr key") *= factor;
                *next.matrix_wd.get_mut(&g).expect("wd key") *= factor;
            }
            MultiplierId::Ewd(g) => {
                *next.matrix_lr.get_mut(&g).expect("lr key") /= factor;
                *next.matrix_wd.get_mut(&g).expect("wd key") *= factor;
            }
            MultiplierId::VectorLr(g) => {
                *next.vector_lr.get_mut(&g).expect("vector key") *= factor;
            }
        }
        next
    }
}

/// Transfer the tuned multipliers to new model shapes. Only forward
/// multipliers change, per their scaling laws; the reference provenance is
/// kept so repeated transfers compose exactly.
pub fn scale_multipliers(base: &MuPMultiplierSet, shapes: ShapeSet) -> MuPMultiplierSet {
    let mut out = base.clone();
    out.shapes = shapes;
    out
}

/// The exact rescaling symmetry: `(m, σ, η, λ) -> (m/p, σp, ηp, λ/p)` leaves
/// the forward pass and the whole AdamW (ε = 0) trajectory invariant.
pub fn apply_symmetry(m: f64, sigma: f64, eta: f64, lambda: f64, p: f64) -> (f64, f64, f64, f64) {
    (m / p, sigma * p, eta * p, lambda / p)
}

/// Exact 3-point quadratic fit of the loss in log2-multiplier coordinates:
/// returns the curvature `a = (L+ + L- - 2 L0) / (log2 p)^2` and the offset
/// of the fitted minimum from the center, in log2 units.
pub fn fit_sensitivity(l_minus: f64, l_center: f64, l_plus: f64, p: f64) -> Result<(f64, f64)> {
    if !(l_minus.is_finite() && l_center.is_finite() && l_plus.is_finite()) {
        return Err(CoreError::NonFinite {
            op: "fit_sensitivity".into(),
            details: format!("losses ({l_minus}, {l_center}, {l_plus})"),
        });
    }
    if p <= 1.0 {
        return Err(CoreError::contract("fit_sensitivity: p must be > 1"));
    }
    let q = p.log2();
    let a = (l_plus + l_minus - 2.0 * l_center) / (q * q);
    let offset = if a == 0.0 { 0.0 } else { q * (l_minus - l_plus) / (2.0 * (l_plus + l_minus - 2.0 * l_center)) };
    Ok((a, offset))
}

/// Outcome of one micro-sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub multiplier: MultiplierId,
    pub p: f64,
    pub loss_minus: f64,
    pub loss_center: f64,
    pub loss_plus: f64,
    /// Coordinate value entering the stage.
    pub previous: f64,
    /// Value of the tunable coordinate after selection.
    pub chosen: f64,
    /// Fitted curvature of the loss in log2 coordinates.
    pub sensitivity: f64,
    /// Oracle failure: the multiplier was held at its center value.
    pub failed: bool,
}

/// Tie tolerance for the automated selection rule: losses within this of the
/// minimum prefer the center value.
pub const SELECTION_TIE_TOL: f64 = 1e-4;

/// One tuning stage: evaluate the baseline, micro-sweep every tunable by
/// `±p` around it, pick per-tunable argmin (center preferred on ties), and
/// assemble the next multiplier set. Evaluation order is fixed, so the
/// records are deterministic for a deterministic oracle.
pub fn tune_stage(
    current: &MuPMultiplierSet,
    p: f64,
    oracle: &mut dyn FnMut(&MuPMultiplierSet) -> Result<f64>,
) -> Result<(MuPMultiplierSet, Vec<SweepRecord>)> {
    if p <= 1.0 {
        return Err(CoreError::contract("tune_stage: p must be > 1"));
    }
    let baseline = oracle(current)?;
    if !baseline.is_finite() {
        return Err(CoreError::NonFinite {
            op: "tune_stage".into(),
            details: "baseline loss".into(),
        });
    }
    let mut next = current.clone();
    let mut records = Vec::with_capacity(35);
    for id in all_multiplier_ids() {
        let plus_set = current.with_coordinate_scaled(id, p);
        let minus_set = current.with_coordinate_scaled(id, 1.0 / p);
        let evals = (oracle(&minus_set), oracle(&plus_set));
        match evals {
            (Ok(lm), Ok(lp)) if lm.is_finite() && lp.is_finite() => {
                let (a, _) = fit_sensitivity(lm, baseline, lp, p)?;
                let best = lm.min(baseline).min(lp);
                let factor = if baseline <= best + SELECTION_TIE_TOL {
                    1.0
                } else if lm < lp {
                    1.0 / p
                } else {
                    p
                };
                next = next.with_coordinate_scaled(id, factor);
                records.push(SweepRecord {
                    multiplier: id,
                    p,
                    loss_minus: lm,
                    loss_center: baseline,
                    loss_plus: lp,
                    previous: current.coordinate(id),
                    chosen: current.coordinate(id) * factor,
                    sensitivity: a,
                    failed: false,
                });
            }
            _ => {
                records.push(SweepRecord {
                    multiplier: id,
                    p,
                    loss_minus: f64::NAN,
                    loss_center: baseline,
                    loss_plus: f64::NAN,
                    previous: current.coordinate(id),
                    chosen: current.coordinate(id),
                    sensitivity: 0.0,
                    failed: true,
                });
            }
        }
    }
    Ok((next, records))
}
