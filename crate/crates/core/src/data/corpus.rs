//! On-disk corpus: one flat binary of length-prefixed token-id records per
//! source, with a JSON sidecar manifest, plus the synthetic corpus
//! generator used when no external data is supplied.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::pretokenize::Vocabulary;
use crate::error::{CoreError, Result};
use crate::rng::{derive, DetRng};
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SourceManifest {
    pub name: String,
    pub docs: u64,
    pub tokens: u64,
    pub sha256: String,
}

/// Write documents as `u32 len | len × u32 ids` records (little-endian).
pub fn write_source(dir: &Path, name: &str, docs: &[Vec<u32>]) -> Result<SourceManifest> {
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut tokens = 0u64;
    for doc in docs {
        if doc.is_empty() {
            return Err(CoreError::Data("empty document".into()));
        }
        bytes.extend_from_slice(&(doc.len() as u32).to_le_bytes());
        for &id in doc {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        tokens += doc.len() as u64;
    }
    let mut f = std::fs::File::create(dir.join(format!("{name}.bin")))?;
    f.write_all(&bytes)?;
    let manifest = SourceManifest {
        name: name.to_string(),
        docs: docs.len() as u64,
        tokens,
        sha256: hex(&Sha256::digest(&bytes)),
    };
    let mf = std::fs::File::create(dir.join(format!("{name}.manifest.json")))?;
    serde_json::to_writer_pretty(mf, &manifest)?;
    Ok(manifest)
}

pub fn read_source(dir: &Path, name: &str) -> Result<Vec<Vec<u32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(dir.join(format!("{name}.bin")))?.read_to_end(&mut bytes)?;
    let mf = std::fs::File::open(dir.join(format!("{name}.manifest.json")))?;
    let manifest: SourceManifest = serde_json::from_reader(mf)?;
    if hex(&Sha256::digest(&bytes)) != manifest.sha256 {
        return Err(CoreError::Data(format!("source {name}: checksum mismatch")));
    }
    let mut docs = Vec::new();
    let mut off = 0usize;
    while off < bytes.len() {
        if off + 4 > bytes.len() {
            return Err(CoreError::Data(format!("source {name}: truncated record header")));
        }
        let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        off += 4;
        if off + 4 * len > bytes.len() {
            return Err(CoreError::Data(format!("source {name}: truncated record body")));
        }
        let doc = bytes[off..off + 4 * len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * len;
        docs.push(doc);
    }
    if docs.len() as u64 != manifest.docs {
        return Err(CoreError::Data(format!("source {name}: document count mismatch")));
    }
    Ok(docs)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// An in-memory corpus: named sources plus the shared vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub sources: BTreeMap<String, Vec<Vec<u32>>>,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let vf = std::fs::File::create(dir.join("vocab.json"))?;
        serde_json::to_writer(vf, &self.vocab)?;
        for (name, docs) in &self.sources {
            write_source(dir, name, docs)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vf = std::fs::File::open(dir.join("vocab.json"))?;
        let mut vocab: Vocabulary = serde_json::from_reader(vf)?;
        vocab.rebuild_index();
        let mut sources = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(fname) = path.file_name().and_then(|s| s.to_str()) else { continue };
            if let Some(name) = fname.strip_suffix(".manifest.json") {
                sources.insert(name.to_string(), read_source(dir, name)?);
            }
        }
        if sources.is_empty() {
            return Err(CoreError::Data(format!("no sources found in {}", dir.display())));
        }
        Ok(Corpus { sources, vocab })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Approximate token budget per source.
    pub tokens_per_source: usize,
}

const SUBJECTS: [&str; 8] = ["fox", "dog", "bird", "cat", "horse", "mouse", "wolf", "bear"];
const VERBS: [&str; 6] = ["jumps", "runs", "walks", "sleeps", "looks", "waits"];
const PLACES: [&str; 6] = ["field", "river", "forest", "hill", "barn", "garden"];
const COLORS: [&str; 5] = ["red", "brown", "grey", "black", "white"];

/// Two learnable synthetic sources: templated sentences ("patterns") and
/// rendered arithmetic integer sequences ("numbers"). Deterministic in the
/// seed; digits and punctuation are split before encoding.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    let mut rng = derive(spec.seed, 0x434f5250);
    let mut pattern_texts = Vec::new();
    let mut number_texts = Vec::new();

    let mut pattern_tokens = 0usize;
    while pattern_tokens < spec.tokens_per_source {
        let sentences = 3 + rng.gen_range(0..8);
        let mut doc = String::new();
        for _ in 0..sentences {
            let s = SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
            let v = VERBS[rng.gen_range(0..VERBS.len())];
            let p = PLACES[rng.gen_range(0..PLACES.len())];
            let c = COLORS[rng.gen_range(0..COLORS.len())];
            doc.push_str(&format!("the {c} {s} {v} over the {p} . "));
        }
        pattern_tokens += doc.split_whitespace().count();
        pattern_texts.push(doc);
    }

    let mut number_tokens = 0usize;
    while number_tokens < spec.tokens_per_source {
        let doc = render_sequence(&mut rng);
        number_tokens += doc.len();
        number_texts.push(doc);
    }

    let mut pieces: Vec<String> = Vec::new();
    for t in pattern_texts.iter().chain(number_texts.iter()) {
        pieces.extend(super::pretokenize(t, true, true));
    }
    let vocab = Vocabulary::build(pieces.iter().map(|s| s.as_str()));

    let encode =
        |texts: &[String]| -> Vec<Vec<u32>> { texts.iter().map(|t| vocab.encode_text(t, true, true)).collect() };
    let mut sources = BTreeMap::new();
    sources.insert("patterns".to_string(), encode(&pattern_texts));
    sources.insert("numbers".to_string(), encode(&number_texts));
    Ok(Corpus { sources, vocab })
}

fn render_sequence(rng: &mut DetRng) -> String {
    let start: u32 = rng.gen_range(0..50);
    let step: u32 = rng.gen_range(1..9);
    let len = rng.gen_range(8..28);
    let mut out = String::new();
    for i in 0..len {
        out.push_str(&(start + i * step).to_string());
        out.push(' ');
    }
    out.push(';');
    out
}
