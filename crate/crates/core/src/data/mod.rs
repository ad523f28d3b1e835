//! Deterministic data pipeline: pre-tokenization, the on-disk corpus format,
//! a synthetic corpus generator, document packing, and the sequential
//! mixture loader with bit-exact cursors.

mod corpus;
mod loader;
mod pretokenize;

pub use corpus::{
    read_source, synthetic_corpus, write_source, Corpus, SourceManifest, SyntheticSpec,
};
pub use loader::{
    largest_remainder_quotas, pack_documents, unpack_rows, validate_row, DataSourceCursor,
    DeterministicLoader, MixtureSpec, PackedBatch, PackedRow,
};
pub use pretokenize::{pretokenize, pretokenize_bytes, Vocabulary};
