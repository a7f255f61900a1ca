use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, RecordStore, Result, SequenceRecord};

/// Epoch-shuffled sampler. The record stream is a concatenation of random
/// permutations, one per epoch, cut into consecutive batches, so every record
/// appears exactly once per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batcher {
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(records: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if records == 0 {
            return Err(DataError::EmptyStore);
        }
        if batch_size == 0 || batch_size > records {
            return Err(DataError::BatchTooLarge {
                batch: batch_size,
                records,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..records).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            batch_size,
            order,
            cursor: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.sort_unstable();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn next_batch(&mut self, store: &RecordStore) -> Vec<SequenceRecord> {
        self.next_indices().into_iter().map(|i| store.get(i)).collect()
    }
}
