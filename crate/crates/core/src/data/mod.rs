//! Corpus preprocessing: tokenize once, persist fixed-length encoded records,
//! and serve batches straight from the record file.

mod batcher;
mod store;
pub mod synthetic;
mod vocab;

pub use batcher::Batcher;
pub use store::{build_store, RecordStore, SequenceRecord, StoreManifest, StorePaths};
pub use vocab::{tokenize, Vocab, CLS, MASK, PAD, RESERVED, RESERVED_TOKENS, SEP, UNK};

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("corpus {0} contains no tokens")]
    EmptyCorpus(String),
    #[error("vocabulary cap {cap} leaves no room beyond the {reserved} reserved tokens")]
    VocabTooSmall { cap: usize, reserved: usize },
    #[error("max_seq_len {0} cannot hold [CLS], one token and [SEP]")]
    SeqLenTooSmall(usize),
    #[error("batch size {batch} exceeds store size {records}")]
    BatchTooLarge { batch: usize, records: usize },
    #[error("record store is empty")]
    EmptyStore,
    #[error("malformed record store: {0}")]
    Malformed(String),
    #[error("malformed vocabulary: {0}")]
    BadVocab(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
