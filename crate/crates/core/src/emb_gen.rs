//! Generator-free corruption in embedding space.
//!
//! `TopK` swaps each selected token for one of its `k` nearest neighbours
//! (squared L2 over the token-embedding table). `Noise` keeps the ids and
//! perturbs the selected embeddings with isotropic Gaussian noise. In both
//! modes every selected position is labelled replaced.

use std::cmp::Ordering;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::RESERVED;
use crate::discriminator::RtdTargets;
use crate::error::{ModelError, ModelResult};
use crate::masking::MaskedBatch;
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementMode {
    Noise,
    TopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Live,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementConfig {
    pub mode: ReplacementMode,
    pub k: usize,
    pub noise_sigma: f64,
    pub aux_loss_coeff: f64,
    pub embedding_source: EmbeddingSource,
    /// Checkpoint whose `embed.tokens` seeds a frozen table.
    pub frozen_embeddings_path: Option<PathBuf>,
}

impl Default for ReplacementConfig {
    fn default() -> Self {
        Self {
            mode: ReplacementMode::TopK,
            k: 10,
            noise_sigma: 1.0,
            aux_loss_coeff: 1.0,
            embedding_source: EmbeddingSource::Live,
            frozen_embeddings_path: None,
        }
    }
}

impl ReplacementConfig {
    pub fn validate(&self, vocab: usize) -> ModelResult<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        match self.mode {
            ReplacementMode::TopK => check_k(self.k, vocab)?,
            ReplacementMode::Noise if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) => {
                return bad(format!("noise sigma must be positive, got {}", self.noise_sigma))
            }
            ReplacementMode::Noise => {}
        }
        if !(self.aux_loss_coeff >= 0.0 && self.aux_loss_coeff.is_finite()) {
            return bad(format!("aux loss coefficient must be >= 0, got {}", self.aux_loss_coeff));
        }
        Ok(())
    }
}

fn check_k(k: usize, vocab: usize) -> ModelResult<()> {
    let candidates = vocab.saturating_sub(RESERVED as usize);
    if k == 0 || candidates <= k {
        return Err(ModelError::InvalidConfig(format!(
            "k = {k} needs more than k non-reserved tokens, vocabulary has {candidates}"
        )));
    }
    Ok(())
}

/// The `k` non-reserved ids closest to `query` (itself excluded) by squared
/// L2 distance over `table[vocab, hidden]`, nearest first. Equal distances go
/// to the smaller id.
pub fn k_nearest<T: Real>(table: &[T], hidden: usize, query: u32, k: usize) -> Vec<u32> {
    let q = &table[query as usize * hidden..(query as usize + 1) * hidden];
    let mut cand: Vec<(f64, u32)> = table
        .chunks_exact(hidden)
        .enumerate()
        .skip(RESERVED as usize)
        .filter(|(id, _)| *id as u32 != query)
        .map(|(id, row)| {
            let d: f64 = row.iter().zip(q).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
            (d, id as u32)
        })
        .collect();
    let cmp = |a: &(f64, u32), b: &(f64, u32)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    let k = k.min(cand.len());
    if k < cand.len() {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand.into_iter().map(|(_, id)| id).collect()
}

/// Top-k substitution on a snapshot of the embedding table. Returns the
/// discriminator targets and the replacement ids in selection order.
pub fn topk_replace<T: Real, R: Rng + ?Sized>(
    masked: &MaskedBatch,
    table: &[T],
    hidden: usize,
    k: usize,
    rng: &mut R,
) -> ModelResult<(RtdTargets, Vec<u32>)> {
    check_k(k, table.len() / hidden)?;
    let mut ids = masked.source_ids.clone();
    let mut labels = vec![0.0f32; ids.len()];
    let mut cache = std::collections::HashMap::new();
    let mut replacements = Vec::with_capacity(masked.n_selected());
    for (flat, orig) in masked.selected_flat().into_iter().zip(masked.selected_originals()) {
        let near = cache.entry(orig).or_insert_with(|| k_nearest(table, hidden, orig, k));
        let pick = near[rng.gen_range(0..near.len())];
        ids[flat] = pick;
        labels[flat] = 1.0;
        replacements.push(pick);
    }
    Ok((
        RtdTargets {
            ids,
            labels,
            weights: masked.content_weights(),
        },
        replacements,
    ))
}

/// Gaussian perturbation `N(0, sigma^2 I)` at every selected position of a
/// `[batch, seq, hidden]` embedding stream. Ids stay unchanged.
pub fn noise_replace<T: Real, R: Rng + ?Sized>(
    masked: &MaskedBatch,
    hidden: usize,
    sigma: f64,
    rng: &mut R,
) -> ModelResult<(RtdTargets, Tensor<T>)> {
    let normal = Normal::new(0.0, sigma).map_err(|e| ModelError::InvalidConfig(format!("noise sigma {sigma}: {e}")))?;
    let mut noise = Tensor::zeros(&[masked.batch, masked.seq_len, hidden]);
    let mut labels = vec![0.0f32; masked.batch * masked.seq_len];
    for flat in masked.selected_flat() {
        labels[flat] = 1.0;
        for x in &mut noise.data_mut()[flat * hidden..(flat + 1) * hidden] {
            *x = T::lit(normal.sample(rng));
        }
    }
    Ok((
        RtdTargets {
            ids: masked.source_ids.clone(),
            labels,
            weights: masked.content_weights(),
        },
        noise,
    ))
}

/// Mean over pairs of `||e(orig) - e(repl)||^2`, read from the embedding
/// table variable; a constant 0 when there are no pairs.
pub fn aux_embedding_loss<T: Real>(tape: &mut Tape<T>, table: Var, originals: &[u32], replacements: &[u32]) -> ModelResult<Var> {
    assert_eq!(originals.len(), replacements.len(), "pairs must align");
    if originals.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero()))?);
    }
    let n = originals.len();
    let a: Vec<usize> = originals.iter().map(|&i| i as usize).collect();
    let b: Vec<usize> = replacements.iter().map(|&i| i as usize).collect();
    let ea = tape.embedding(table, &a, &[n])?;
    let eb = tape.embedding(table, &b, &[n])?;
    let d = tape.sub(ea, eb)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SequenceRecord, CLS, PAD, SEP};
    use crate::masking::{apply_mlm_mask, MaskConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reserved rows are zero; content rows follow.
    fn table(rows: &[&[f64]]) -> Vec<f64> {
        let h = rows[0].len();
        let mut t = vec![0.0; RESERVED as usize * h];
        for r in rows {
            t.extend_from_slice(r);
        }
        t
    }

    fn masked(seed: u64) -> MaskedBatch {
        let recs: Vec<_> = [10usize, 20, 7]
            .iter()
            .map(|&n| {
                let mut ids = vec![CLS];
                ids.extend((0..n as u32).map(|i| RESERVED + i % 12));
                ids.push(SEP);
                let true_length = ids.len();
                ids.resize(24, PAD);
                SequenceRecord {
                    token_ids: ids,
                    true_length,
                }
            })
            .collect();
        apply_mlm_mask(&recs, &mut ChaCha8Rng::seed_from_u64(seed), &MaskConfig::default(), 20).unwrap()
    }

    #[test]
    fn nearest_by_inspection() {
        let t = table(&[&[0.0, 0.0], &[1.0, 0.0], &[5.0, 0.0]]);
        assert_eq!(k_nearest(&t, 2, RESERVED, 1), vec![RESERVED + 1]);
        assert_eq!(k_nearest(&t, 2, RESERVED + 2, 2), vec![RESERVED + 1, RESERVED]);
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        let t = table(&[&[0.0], &[1.0], &[-1.0], &[1.0]]);
        assert_eq!(k_nearest(&t, 1, RESERVED, 2), vec![RESERVED + 1, RESERVED + 2]);
    }

    #[test]
    fn replaced_fraction_is_the_selection_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Vec<f64> = (0..20 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for seed in 0..20 {
            let m = masked(seed);
            let (targets, repl) = topk_replace(&m, &t, 4, 3, &mut rng).unwrap();
            assert_eq!(targets.n_replaced(), m.n_selected());
            assert_eq!(targets.n_content(), m.n_content());
            for (r, o) in repl.iter().zip(m.selected_originals()) {
                assert_ne!(*r, o);
                assert!(*r >= RESERVED);
            }
        }
    }

    #[test]
    fn k_must_leave_room() {
        // 12 non-reserved rows
        let t: Vec<f64> = (0..17).map(|i| i as f64).collect();
        let m = masked(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(topk_replace(&m, &t, 1, 12, &mut rng).is_err());
        assert!(topk_replace(&m, &t, 1, 11, &mut rng).is_ok());
    }

    #[test]
    fn noise_only_at_selected_positions() {
        let m = masked(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (targets, noise) = noise_replace::<f64, _>(&m, 3, 0.5, &mut rng).unwrap();
        assert_eq!(targets.ids, m.source_ids);
        let sel: std::collections::HashSet<_> = m.selected_flat().into_iter().collect();
        for (flat, row) in noise.data().chunks(3).enumerate() {
            assert_eq!(row.iter().any(|x| *x != 0.0), sel.contains(&flat));
            assert_eq!(targets.labels[flat] == 1.0, sel.contains(&flat));
        }
    }

    #[test]
    fn aux_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::new(&[3, 2], vec![0.0, 0.0, 3.0, 4.0, 1.0, 0.0]).unwrap()).unwrap();
        let l = aux_embedding_loss(&mut tape, t, &[0], &[1]).unwrap();
        assert_eq!(tape.value(l), &[25.0]);
        let l = aux_embedding_loss(&mut tape, t, &[1], &[1]).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        // squared distances 1 and 9
        let t2 = tape.constant(Tensor::new(&[3, 1], vec![0.0, 1.0, 3.0]).unwrap()).unwrap();
        let l = aux_embedding_loss(&mut tape, t2, &[0, 0], &[1, 2]).unwrap();
        assert_eq!(tape.value(l), &[5.0]);
        let l = aux_embedding_loss(&mut tape, t2, &[], &[]).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = ReplacementConfig::default();
        assert!(c.validate(100).is_ok());
        assert!(c.validate(15).is_err());
        c.mode = ReplacementMode::Noise;
        c.noise_sigma = 0.0;
        assert!(c.validate(100).is_err());
    }
}
