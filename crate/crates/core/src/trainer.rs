//! The training loop: deterministic batches, AdamW with group multipliers,
//! schedule-driven (η, λ, batch), per-group parameter norms, a running-median
//! batch-skip guard, and bit-exact checkpoint/resume.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::block::SeqMeta;
use crate::config::HybridConfig;
use crate::data::{Corpus, DataSourceCursor, DeterministicLoader, MixtureSpec, PackedRow};
use crate::error::{CoreError, Result};
use crate::model::HybridModel;
use crate::mup::MuPMultiplierSet;
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::scalar::Scalar;
use crate::schedule::{schedule_at, ScheduleSpec};
use crate::ssm::DtPolicy;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Drop a batch when its loss exceeds `multiple` times the running median
/// of the last `window` accepted losses; optimizer moments stay untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipGuard {
    pub multiple: f64,
    pub window: usize,
}

impl Default for SkipGuard {
    fn default() -> Self {
        SkipGuard { multiple: 5.0, window: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: HybridConfig,
    pub schedule: ScheduleSpec,
    pub adamw: AdamWConfig,
    pub dt_policy: DtPolicy,
    pub seq_len: usize,
    pub steps: u64,
    pub mixture: Vec<(String, f64)>,
    pub log_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub skip_guard: SkipGuard,
    /// Testing hook: replace this step's batch with garbage tokens so the
    /// skip guard can be exercised deterministically.
    #[serde(default)]
    pub corrupt_batch_at: Option<u64>,
    /// Multiplier set to train with; the tuned base set when absent. The
    /// tuner's training oracle evaluates candidate sets through this.
    #[serde(default)]
    pub multipliers: Option<MuPMultiplierSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub tokens: u64,
    pub loss: f64,
    pub eta: f64,
    pub lambda: f64,
    pub batch_rows: usize,
    pub grad_norm: f64,
    pub skipped: bool,
    /// Mean-fashion squared norms `(1/mn) Σ W²` per parameter kind.
    pub group_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetrics>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub skipped_batches: u64,
    pub tokens_seen: u64,
    /// Noise-level measure: mean loss just before the decay phase minus the
    /// mean loss after it. `None` when the run never entered (and finished)
    /// the decay phase. Diagnostic only, no acceptance threshold.
    pub noise_gap: Option<f64>,
}

fn noise_gap(metrics: &[StepMetrics], schedule: &ScheduleSpec) -> Option<f64> {
    let decay_start = schedule.stable_tokens;
    let decay_end = decay_start + schedule.decay.duration_tokens;
    if !decay_end.is_finite() {
        return None;
    }
    let window = 8;
    let before: Vec<f64> = metrics
        .iter()
        .filter(|m| (m.tokens as f64) <= decay_start)
        .rev()
        .take(window)
        .map(|m| m.loss)
        .collect();
    let after: Vec<f64> = metrics
        .iter()
        .filter(|m| (m.tokens as f64) >= decay_end)
        .rev()
        .take(window)
        .map(|m| m.loss)
        .collect();
    if before.is_empty() || after.is_empty() {
        return None;
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some(avg(&before) - avg(&after))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainerState {
    step: u64,
    tokens_seen: u64,
    cursors: Vec<DataSourceCursor>,
    next_doc_id: u64,
    median_window: Vec<f64>,
    skipped_batches: u64,
}

fn median_of(window: &[f64]) -> f64 {
    let mut v = window.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Run (or resume) training. `out_dir` receives metrics and checkpoints;
/// pass `None` for in-memory runs.
pub fn train<S: Scalar>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    if corpus.vocab_size() > cfg.model.vocab {
        return Err(CoreError::Config(format!(
            "model vocab {} is smaller than corpus vocab {}",
            cfg.model.vocab,
            corpus.vocab_size()
        )));
    }
    let mixture = MixtureSpec { entries: cfg.mixture.clone() };
    let mut loader = DeterministicLoader::new(corpus, mixture, cfg.seq_len)?;
    let base_mults = cfg.multipliers.clone().unwrap_or_else(MuPMultiplierSet::base);

    let (mut model, mut opt_state, mut state) = match resume_from {
        Some(dir) => {
            let model: HybridModel<S> = HybridModel::load(&dir.join("model"))?;
            let opt_state = load_optimizer::<S>(&dir.join("optimizer.bin"), &model)?;
            let tf = std::fs::File::open(dir.join("trainer.json"))?;
            let state: TrainerState = serde_json::from_reader(tf)?;
            loader.restore(state.cursors.clone(), state.next_doc_id)?;
            (model, opt_state, state)
        }
        None => (
            HybridModel::<S>::new(cfg.model.clone(), &base_mults)?,
            OptimizerState::new(),
            TrainerState {
                step: 0,
                tokens_seen: 0,
                cursors: Vec::new(),
                next_doc_id: 0,
                median_window: Vec::new(),
                skipped_batches: 0,
            },
        ),
    };

    let mut metrics_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    let start_step = state.step;
    for step in start_step..cfg.steps {
        let point = schedule_at(state.tokens_seen as f64, &cfg.schedule)?;
        let rows = ((point.batch_tokens / cfg.seq_len as f64).round() as usize).max(1);
        let mut batch = loader.next_batch(rows)?;
        if cfg.corrupt_batch_at == Some(step) {
            corrupt_batch(&mut batch.rows, cfg.model.vocab);
        }

        let mut tape = Tape::new();
        let vars = model.register(&mut tape)?;
        let mut total = None;
        for row in &batch.rows {
            let tokens: Vec<usize> = row.tokens.iter().map(|&t| t as usize).collect();
            let meta = SeqMeta {
                resets: row.resets.clone(),
                doc_ids: row.doc_ids.clone(),
                positions: row.positions.clone(),
            };
            let loss = model.loss(&mut tape, &vars, &tokens, &meta, &cfg.dt_policy, step)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = total.expect("at least one row");
        let loss_var = tape.scale(total, S::from_f64(1.0 / batch.rows.len() as f64));
        let loss = tape.value(loss_var).item().as_f64();

        if !loss.is_finite() {
            if let Some(dir) = out_dir {
                save_checkpoint(&model, &opt_state, &state, &loader, &dir.join("abort"))?;
            }
            return Err(CoreError::NonFinite {
                op: "train".into(),
                details: format!("loss at step {step}; final state saved"),
            });
        }
        if initial_loss.is_nan() {
            initial_loss = loss;
        }
        final_loss = loss;

        let guard_active = state.median_window.len() >= (cfg.skip_guard.window / 2).max(4);
        let skip = guard_active && loss > cfg.skip_guard.multiple * median_of(&state.median_window);

        let mut grad_norm = 0.0;
        if !skip {
            let grads = tape.backward(loss_var)?;
            grad_norm = grads
                .values()
                .map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            adamw_step(
                &mut model.params,
                &grads,
                &model.mults,
                point.eta,
                point.lambda,
                &mut opt_state,
                &cfg.adamw,
            )?;
            state.median_window.push(loss);
            let cap = cfg.skip_guard.window.max(1);
            if state.median_window.len() > cap {
                let drop = state.median_window.len() - cap;
                state.median_window.drain(..drop);
            }
        } else {
            state.skipped_batches += 1;
        }

        state.tokens_seen += (batch.rows.len() * cfg.seq_len) as u64;
        state.step = step + 1;
        state.cursors = loader.cursors().to_vec();
        state.next_doc_id = loader.next_doc_id();

        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            let m = StepMetrics {
                step,
                tokens: state.tokens_seen,
                loss,
                eta: point.eta,
                lambda: point.lambda,
                batch_rows: batch.rows.len(),
                grad_norm,
                skipped: skip,
                group_norms: model.params.group_mean_square(),
            };
            if let Some(f) = metrics_file.as_mut() {
                serde_json::to_writer(&mut *f, &m)?;
                f.write_all(b"\n")?;
            }
            metrics.push(m);
        }

        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                save_checkpoint(
                    &model,
                    &opt_state,
                    &state,
                    &loader,
                    &dir.join(format!("step{:07}", state.step)),
                )?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&model, &opt_state, &state, &loader, &dir.join("final"))?;
    }
    let gap = noise_gap(&metrics, &cfg.schedule);
    Ok(TrainOutcome {
        metrics,
        initial_loss,
        final_loss,
        skipped_batches: state.skipped_batches,
        tokens_seen: state.tokens_seen,
        noise_gap: gap,
    })
}

fn corrupt_batch(rows: &mut [PackedRow], vocab: usize) {
    for row in rows {
        for (i, t) in row.tokens.iter_mut().enumerate() {
            *t = ((i * 97 + 13) % vocab) as u32;
        }
    }
}

fn save_checkpoint<S: Scalar>(
    model: &HybridModel<S>,
    opt: &OptimizerState<S>,
    state: &TrainerState,
    loader: &DeterministicLoader,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.save(&dir.join("model"))?;
    save_optimizer(opt, model, &dir.join("optimizer.bin"))?;
    let mut snapshot = TrainerState {
        step: state.step,
        tokens_seen: state.tokens_seen,
        cursors: loader.cursors().to_vec(),
        next_doc_id: loader.next_doc_id(),
        median_window: state.median_window.clone(),
        skipped_batches: state.skipped_batches,
    };
    // `state.cursors` is already synced after each step; prefer it if set.
    if !state.cursors.is_empty() {
        snapshot.cursors = state.cursors.clone();
        snapshot.next_doc_id = state.next_doc_id;
    }
    let f = std::fs::File::create(dir.join("trainer.json"))?;
    serde_json::to_writer_pretty(f, &snapshot)?;
    Ok(())
}

fn save_optimizer<S: Scalar>(
    opt: &OptimizerState<S>,
    model: &HybridModel<S>,
    path: &Path,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&opt.step.to_le_bytes());
    for entry in model.params.entries() {
        for map in [&opt.m, &opt.v] {
            match map.get(&entry.name) {
                Some(t) => {
                    for &v in t.data() {
                        v.write_le(&mut bytes);
                    }
                }
                None => {
                    for _ in 0..entry.tensor.len() {
                        S::zero().write_le(&mut bytes);
                    }
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn load_optimizer<S: Scalar>(path: &Path, model: &HybridModel<S>) -> Result<OptimizerState<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(CoreError::Checkpoint("optimizer blob too short".into()));
    }
    let step = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let mut off = 8usize;
    let mut state = OptimizerState::new();
    state.step = step;
    for entry in model.params.entries() {
        let numel = entry.tensor.len();
        for which in 0..2 {
            let need = numel * S::BYTES;
            if off + need > bytes.len() {
                return Err(CoreError::Checkpoint("optimizer blob truncated".into()));
            }
            let data: Vec<S> =
                bytes[off..off + need].chunks_exact(S::BYTES).map(S::read_le).collect();
            off += need;
            let t = Tensor::new(entry.tensor.shape().to_vec(), data)?;
            if which == 0 {
                state.m.insert(entry.name.clone(), t);
            } else {
                state.v.insert(entry.name.clone(), t);
            }
        }
    }
    Ok(state)
}

/// Checkpoint directory of the latest periodic checkpoint under `out_dir`.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(String, PathBuf)> = None;
    for entry in std::fs::read_dir(out_dir).ok()?.flatten() {
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else { continue };
        if name.starts_with("step") && path.join("trainer.json").exists() {
            if best.as_ref().map(|(b, _)| name > b.as_str()).unwrap_or(true) {
                best = Some((name.to_string(), path));
            }
        }
    }
    best.map(|(_, p)| p)
}
