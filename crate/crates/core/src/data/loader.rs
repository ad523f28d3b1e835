//! Document packing and the deterministic mixture loader.
//!
//! Two packing surfaces with different boundary semantics:
//!
//! * [`pack_documents`] is the pure packer: one contiguous stream chopped
//!   into rows, documents split across row boundaries continue with
//!   `reset = 0` and running positions, so unpacking by resets recovers the
//!   exact input streams. A continuation row is recognizable by
//!   `positions[0] > 0`.
//! * [`DeterministicLoader::next_batch`] emits training rows: every row
//!   start, source seam, and document start carries `reset = 1`, because
//!   rows are processed from zero state and tokens from different documents
//!   or sources must never share state within a row. Under these semantics
//!   every emitted row starts with a reset.

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{CoreError, Result};

/// One packed training row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedRow {
    pub tokens: Vec<u32>,
    /// 1 where state must not flow from the previous token.
    pub resets: Vec<bool>,
    pub doc_ids: Vec<u64>,
    /// Restarting at 0 wherever `resets` is set.
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub rows: Vec<PackedRow>,
}

impl PackedRow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Check the packing invariants of one row. Continuation rows (from
/// [`pack_documents`]) may start without a reset if and only if their first
/// position continues a document (`positions[0] > 0`).
pub fn validate_row(row: &PackedRow) -> Result<()> {
    let n = row.tokens.len();
    if row.resets.len() != n || row.doc_ids.len() != n || row.positions.len() != n {
        return Err(CoreError::Data("row field lengths differ".into()));
    }
    if n == 0 {
        return Err(CoreError::Data("empty row".into()));
    }
    if !row.resets[0] && row.positions[0] == 0 {
        return Err(CoreError::Data("row starts mid-stream without continuation marker".into()));
    }
    for t in 0..n {
        if t > 0 && row.doc_ids[t] < row.doc_ids[t - 1] {
            return Err(CoreError::Data(format!("doc_ids decrease at {t}")));
        }
        if row.resets[t] && row.positions[t] != 0 {
            return Err(CoreError::Data(format!("position not reset at reset {t}")));
        }
        if t > 0 && !row.resets[t] {
            if row.positions[t] != row.positions[t - 1] + 1 {
                return Err(CoreError::Data(format!("position jump at {t}")));
            }
            if row.doc_ids[t] != row.doc_ids[t - 1] {
                return Err(CoreError::Data(format!("doc id changed without reset at {t}")));
            }
        }
    }
    Ok(())
}

/// Greedy sequential packing of whole documents into rows of `seq_len`
/// tokens. The final row may be shorter. Documents split across row
/// boundaries continue with `reset = 0` and running positions.
pub fn pack_documents(docs: &[Vec<u32>], seq_len: usize) -> Result<Vec<PackedRow>> {
    if seq_len == 0 {
        return Err(CoreError::contract("pack_documents: seq_len must be >= 1"));
    }
    if docs.is_empty() {
        return Err(CoreError::Data("pack_documents: no documents".into()));
    }
    let total: usize = docs.iter().map(|d| d.len()).sum();
    let mut tokens = Vec::with_capacity(total);
    let mut resets = Vec::with_capacity(total);
    let mut doc_ids = Vec::with_capacity(total);
    let mut positions = Vec::with_capacity(total);
    for (i, doc) in docs.iter().enumerate() {
        if doc.is_empty() {
            return Err(CoreError::Data(format!("pack_documents: document {i} is empty")));
        }
        for (j, &tok) in doc.iter().enumerate() {
            tokens.push(tok);
            resets.push(j == 0);
            doc_ids.push(i as u64);
            positions.push(j);
        }
    }
    let mut rows = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + seq_len).min(total);
        rows.push(PackedRow {
            tokens: tokens[start..end].to_vec(),
            resets: resets[start..end].to_vec(),
            doc_ids: doc_ids[start..end].to_vec(),
            positions: positions[start..end].to_vec(),
        });
        start = end;
    }
    Ok(rows)
}

/// Inverse of [`pack_documents`]: concatenate rows in order and split at
/// resets.
pub fn unpack_rows(rows: &[PackedRow]) -> Vec<Vec<u32>> {
    let mut docs: Vec<Vec<u32>> = Vec::new();
    for row in rows {
        for (t, &tok) in row.tokens.iter().enumerate() {
            if row.resets[t] || docs.is_empty() {
                docs.push(Vec::new());
            }
            docs.last_mut().expect("document open").push(tok);
        }
    }
    docs
}

/// Sequential read position in one source, serializable bit-exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSourceCursor {
    pub source: String,
    pub doc_index: usize,
    pub token_offset: usize,
    pub documents_consumed: u64,
    /// One epoch is a full pass over all unique tokens of this source.
    pub epochs_completed: u64,
}

/// Source weights; must be non-negative and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub entries: Vec<(String, f64)>,
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(CoreError::Config("mixture has no sources".into()));
        }
        if self.entries.iter().any(|(_, w)| *w < 0.0) {
            return Err(CoreError::Config("mixture weights must be >= 0".into()));
        }
        let sum: f64 = self.entries.iter().map(|(_, w)| w).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!("mixture weights sum to {sum}, expected 1")));
        }
        Ok(())
    }

    pub fn uniform(names: impl IntoIterator<Item = String>) -> Self {
        let names: Vec<String> = names.into_iter().collect();
        let w = 1.0 / names.len() as f64;
        MixtureSpec { entries: names.into_iter().map(|n| (n, w)).collect() }
    }
}

/// Integer quotas proportional to weights summing exactly to `total`:
/// floors first, then the largest fractional remainders win the leftovers
/// (ties broken by lower index).
pub fn largest_remainder_quotas(weights: &[f64], total: usize) -> Vec<usize> {
    let shares: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut quotas: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        quotas[order[i % order.len()]] += 1;
    }
    quotas
}

/// Reads each source strictly sequentially, deals per-batch token quotas by
/// largest remainder, and packs into rows. Cursor state fully determines the
/// remaining stream: save the cursors, restore them, and the continuation is
/// bit-identical.
pub struct DeterministicLoader<'a> {
    corpus: &'a Corpus,
    mixture: MixtureSpec,
    seq_len: usize,
    cursors: Vec<DataSourceCursor>,
    next_doc_id: u64,
}

impl<'a> DeterministicLoader<'a> {
    pub fn new(corpus: &'a Corpus, mixture: MixtureSpec, seq_len: usize) -> Result<Self> {
        mixture.validate()?;
        if seq_len == 0 {
            return Err(CoreError::contract("loader: seq_len must be >= 1"));
        }
        let mut cursors = Vec::new();
        for (name, _) in &mixture.entries {
            let docs = corpus
                .sources
                .get(name)
                .ok_or_else(|| CoreError::Data(format!("unknown source {name}")))?;
            if docs.is_empty() || docs.iter().all(|d| d.is_empty()) {
                return Err(CoreError::Data(format!("source {name} is empty")));
            }
            cursors.push(DataSourceCursor {
                source: name.clone(),
                doc_index: 0,
                token_offset: 0,
                documents_consumed: 0,
                epochs_completed: 0,
            });
        }
        Ok(DeterministicLoader { corpus, mixture, seq_len, cursors, next_doc_id: 0 })
    }

    pub fn cursors(&self) -> &[DataSourceCursor] {
        &self.cursors
    }

    pub fn next_doc_id(&self) -> u64 {
        self.next_doc_id
    }

    /// Restore a saved position. The cursor list must match the mixture.
    pub fn restore(&mut self, cursors: Vec<DataSourceCursor>, next_doc_id: u64) -> Result<()> {
        if cursors.len() != self.cursors.len()
            || cursors
                .iter()
                .zip(&self.cursors)
                .any(|(a, b)| a.source != b.source)
        {
            return Err(CoreError::Data("cursor set does not match the mixture".into()));
        }
        self.cursors = cursors;
        self.next_doc_id = next_doc_id;
        Ok(())
    }

    /// Emit `rows` rows of `seq_len` tokens.
    pub fn next_batch(&mut self, rows: usize) -> Result<PackedBatch> {
        if rows == 0 {
            return Err(CoreError::contract("next_batch: rows must be >= 1"));
        }
        let total = rows * self.seq_len;
        let weights: Vec<f64> = self.mixture.entries.iter().map(|(_, w)| *w).collect();
        let quotas = largest_remainder_quotas(&weights, total);

        let mut tokens = Vec::with_capacity(total);
        let mut resets = Vec::with_capacity(total);
        for (i, &quota) in quotas.iter().enumerate() {
            if quota == 0 {
                continue;
            }
            let docs = &self.corpus.sources[&self.cursors[i].source];
            let cur = &mut self.cursors[i];
            let mut needed = quota;
            let mut segment_start = true;
            while needed > 0 {
                let doc = &docs[cur.doc_index];
                let avail = doc.len() - cur.token_offset;
                let take = avail.min(needed);
                for j in 0..take {
                    tokens.push(doc[cur.token_offset + j]);
                    // Resets at document starts and at the start of this
                    // source's segment (cross-batch continuations restart).
                    resets.push((cur.token_offset + j == 0) || (segment_start && j == 0));
                }
                segment_start = false;
                cur.token_offset += take;
                needed -= take;
                if cur.token_offset == doc.len() {
                    cur.token_offset = 0;
                    cur.doc_index += 1;
                    cur.documents_consumed += 1;
                    if cur.doc_index == docs.len() {
                        cur.doc_index = 0;
                        cur.epochs_completed += 1;
                    }
                }
            }
        }
        debug_assert_eq!(tokens.len(), total);

        // Rows restart state unconditionally.
        for r in 0..rows {
            resets[r * self.seq_len] = true;
        }
        let mut out_rows = Vec::with_capacity(rows);
        for r in 0..rows {
            let lo = r * self.seq_len;
            let hi = lo + self.seq_len;
            let mut doc_ids = Vec::with_capacity(self.seq_len);
            let mut positions = Vec::with_capacity(self.seq_len);
            let mut pos = 0usize;
            for t in lo..hi {
                if resets[t] {
                    self.next_doc_id += 1;
                    pos = 0;
                }
                doc_ids.push(self.next_doc_id);
                positions.push(pos);
                pos += 1;
            }
            out_rows.push(PackedRow {
                tokens: tokens[lo..hi].to_vec(),
                resets: resets[lo..hi].to_vec(),
                doc_ids,
                positions,
            });
        }
        Ok(PackedBatch { rows: out_rows })
    }
}
