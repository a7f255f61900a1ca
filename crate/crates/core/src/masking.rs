//! MLM position selection and corruption.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SequenceRecord, MASK, RESERVED};

/// `mlm_labels` value at positions that are not selected.
pub const IGNORE_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskError {
    #[error("sequence {0} has no content tokens")]
    EmptyContent(usize),
    #[error("mask ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios(MaskRatios),
    #[error("mask fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("random replacement needs a vocabulary beyond the reserved ids (size {0})")]
    NoRandomTokens(usize),
    #[error("batch is empty or records have different lengths")]
    RaggedBatch,
}

/// Fate of a selected position: `[MASK]`, a random token, or unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRatios {
    pub mask: f64,
    pub random: f64,
    pub original: f64,
}

impl MaskRatios {
    pub const ELECTRA: Self = Self {
        mask: 0.85,
        random: 0.0,
        original: 0.15,
    };
    pub const BERT: Self = Self {
        mask: 0.80,
        random: 0.10,
        original: 0.10,
    };

    pub fn validate(&self) -> Result<(), MaskError> {
        let parts = [self.mask, self.random, self.original];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(MaskError::BadRatios(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub mask_fraction: f64,
    pub ratios: MaskRatios,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.15,
            ratios: MaskRatios::ELECTRA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask,
    Random,
    Original,
}

/// A batch after MLM corruption. Flat buffers are `[batch * seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    /// Ids before corruption.
    pub source_ids: Vec<u32>,
    pub input_ids: Vec<u32>,
    pub true_lengths: Vec<usize>,
    /// Ascending selected positions per sequence.
    pub selected: Vec<Vec<usize>>,
    pub original_ids: Vec<Vec<u32>>,
    pub corruption: Vec<Vec<Corruption>>,
    pub mlm_labels: Vec<u32>,
}

impl MaskedBatch {
    /// Flat indices (`b * seq_len + t`) of all selected positions in order.
    pub fn selected_flat(&self) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .flat_map(|(b, pos)| pos.iter().map(move |t| b * self.seq_len + t))
            .collect()
    }

    /// Original ids at [`Self::selected_flat`] positions.
    pub fn selected_originals(&self) -> Vec<u32> {
        self.original_ids.iter().flatten().copied().collect()
    }

    pub fn n_selected(&self) -> usize {
        self.selected.iter().map(Vec::len).sum()
    }

    /// 1.0 at non-pad positions, 0.0 at padding.
    pub fn content_weights(&self) -> Vec<f32> {
        let mut w = vec![0.0; self.batch * self.seq_len];
        for (b, &len) in self.true_lengths.iter().enumerate() {
            w[b * self.seq_len..b * self.seq_len + len].iter_mut().for_each(|x| *x = 1.0);
        }
        w
    }

    pub fn n_content(&self) -> usize {
        self.true_lengths.iter().sum()
    }
}

/// Number of positions to select from `content` tokens: round half up, at
/// least one.
pub fn selection_count(content: usize, fraction: f64) -> usize {
    ((fraction * content as f64 + 0.5).floor() as usize).clamp(1, content)
}

/// Selects `mask_fraction` of each sequence's content positions (never
/// `[CLS]`, `[SEP]` or padding) uniformly without replacement and corrupts
/// them according to `cfg.ratios`. Random replacements are drawn uniformly
/// from the non-reserved ids.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    records: &[SequenceRecord],
    rng: &mut R,
    cfg: &MaskConfig,
    vocab_size: usize,
) -> Result<MaskedBatch, MaskError> {
    cfg.ratios.validate()?;
    if !(cfg.mask_fraction > 0.0 && cfg.mask_fraction <= 1.0) {
        return Err(MaskError::BadFraction(cfg.mask_fraction));
    }
    if cfg.ratios.random > 0.0 && vocab_size <= RESERVED as usize {
        return Err(MaskError::NoRandomTokens(vocab_size));
    }
    let seq_len = records.first().ok_or(MaskError::RaggedBatch)?.token_ids.len();
    if records.iter().any(|r| r.token_ids.len() != seq_len) {
        return Err(MaskError::RaggedBatch);
    }

    let batch = records.len();
    let mut source_ids = Vec::with_capacity(batch * seq_len);
    for r in records {
        source_ids.extend_from_slice(&r.token_ids);
    }
    let mut input_ids = source_ids.clone();
    let mut mlm_labels = vec![IGNORE_LABEL; batch * seq_len];
    let mut selected = Vec::with_capacity(batch);
    let mut original_ids = Vec::with_capacity(batch);
    let mut corruption = Vec::with_capacity(batch);

    for (b, r) in records.iter().enumerate() {
        // content lives strictly between [CLS] and [SEP]
        let content = r.true_length.saturating_sub(2);
        if content == 0 {
            return Err(MaskError::EmptyContent(b));
        }
        let k = selection_count(content, cfg.mask_fraction);
        let mut pos: Vec<usize> = index::sample(rng, content, k).into_iter().map(|i| i + 1).collect();
        pos.sort_unstable();

        let mut orig = Vec::with_capacity(k);
        let mut kinds = Vec::with_capacity(k);
        for &t in &pos {
            let flat = b * seq_len + t;
            let id = source_ids[flat];
            orig.push(id);
            mlm_labels[flat] = id;
            let u: f64 = rng.gen();
            let kind = if u < cfg.ratios.mask {
                input_ids[flat] = MASK;
                Corruption::Mask
            } else if u < cfg.ratios.mask + cfg.ratios.random {
                input_ids[flat] = rng.gen_range(RESERVED..vocab_size as u32);
                Corruption::Random
            } else {
                Corruption::Original
            };
            kinds.push(kind);
        }
        selected.push(pos);
        original_ids.push(orig);
        corruption.push(kinds);
    }

    Ok(MaskedBatch {
        batch,
        seq_len,
        source_ids,
        input_ids,
        true_lengths: records.iter().map(|r| r.true_length).collect(),
        selected,
        original_ids,
        corruption,
        mlm_labels,
    })
}
