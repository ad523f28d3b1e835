//! Whitespace pre-tokenization with optional digit and punctuation
//! splitting, and the byte-fallback vocabulary on top of it.

use std::collections::BTreeMap;

use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

use crate::error::{CoreError, Result};

fn is_split_punct(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Whitespace segmentation; with `split_digits` every decimal digit becomes
/// its own piece, with `split_punct` every Unicode punctuation codepoint
/// does.
pub fn pretokenize(text: &str, split_digits: bool, split_punct: bool) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if !split_digits && !split_punct {
            out.push(word.to_string());
            continue;
        }
        let mut run = String::new();
        for c in word.chars() {
            let isolate = (split_digits && c.is_ascii_digit()) || (split_punct && is_split_punct(c));
            if isolate {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                out.push(c.to_string());
            } else {
                run.push(c);
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
    }
    out
}

/// [`pretokenize`] over raw bytes; invalid UTF-8 is an error.
pub fn pretokenize_bytes(bytes: &[u8], split_digits: bool, split_punct: bool) -> Result<Vec<String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| CoreError::Data(format!("invalid UTF-8: {e}")))?;
    Ok(pretokenize(text, split_digits, split_punct))
}

/// Byte-level vocabulary: ids 0..=255 are raw bytes, ids from 256 up are
/// whole pieces harvested from the corpus (sorted, so construction is
/// deterministic). Unknown pieces at encode time fall back to their bytes.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocabulary {
    pieces: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

pub const BYTE_VOCAB: usize = 256;

impl Vocabulary {
    pub fn build<'a>(pieces: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = pieces.into_iter().map(|s| s.to_string()).collect();
        uniq.sort();
        uniq.dedup();
        let mut v = Vocabulary { pieces: uniq, index: BTreeMap::new() };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), (BYTE_VOCAB + i) as u32))
            .collect();
    }

    pub fn size(&self) -> usize {
        BYTE_VOCAB + self.pieces.len()
    }

    pub fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        match self.index.get(piece) {
            Some(&id) => out.push(id),
            None => out.extend(piece.bytes().map(|b| b as u32)),
        }
    }

    pub fn encode_text(&self, text: &str, split_digits: bool, split_punct: bool) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenize(text, split_digits, split_punct) {
            self.encode_piece(&piece, &mut out);
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        let mut out = String::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &id in ids {
            if (id as usize) < BYTE_VOCAB {
                bytes.push(id as u8);
            } else {
                flush(&mut bytes, &mut out);
                if let Some(p) = self.pieces.get(id as usize - BYTE_VOCAB) {
                    out.push(' ');
                    out.push_str(p);
                }
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}
