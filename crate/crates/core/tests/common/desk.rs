//! Small stores and configurations for training tests.

use std::path::Path;

use rtd_core::data::{build_store, synthetic, RecordStore};
use rtd_core::trainer::{TrainConfig, Variant};

pub const SEQ_LEN: usize = 32;

pub fn store_from_text(dir: &Path, name: &str, text: &str, seq_len: usize) -> RecordStore {
    std::fs::create_dir_all(dir).expect("create dir");
    let corpus = dir.join(format!("{name}.txt"));
    std::fs::write(&corpus, text).expect("write corpus");
    build_store(&corpus, dir, name, 8192, seq_len).expect("build store")
}

/// Fifty synthetic lines.
pub fn smoke_store(dir: &Path) -> RecordStore {
    store_from_text(dir, "smoke", &synthetic::corpus_lines(0, 50), SEQ_LEN)
}

/// About one megabyte of synthetic text.
pub fn megabyte_store(dir: &Path) -> RecordStore {
    store_from_text(dir, "mb", &synthetic::corpus(0, 1_000_000), SEQ_LEN)
}

/// Desk-scale model: hidden 32, 2 heads, FFN 128, batch 16.
pub fn desk(variant: Variant) -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(variant);
    cfg.model.hidden = 32;
    cfg.model.heads = 2;
    cfg.model.ffn = 128;
    cfg.batch_size = 16;
    cfg.optim.lr = 1e-3;
    cfg
}

/// Very small model for fast mechanical tests.
pub fn tiny(variant: Variant, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::for_variant(variant);
    cfg.model.hidden = 16;
    cfg.model.heads = 2;
    cfg.model.ffn = 32;
    cfg.batch_size = 4;
    cfg.window = 10;
    cfg.steps = steps;
    cfg.optim.lr = 1e-3;
    cfg
}
