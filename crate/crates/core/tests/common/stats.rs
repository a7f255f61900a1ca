//! Monte-Carlo measurements shared by the statistical tests and the
//! acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rtd_core::data::{SequenceRecord, CLS, PAD, RESERVED, SEP};
use rtd_core::emb_gen::{noise_replace, topk_replace};
use rtd_core::generator::{gumbel_sample, GumbelNoise};
use rtd_core::masking::{apply_mlm_mask, Corruption, MaskConfig, MaskRatios, MaskedBatch};

pub fn record(rng: &mut ChaCha8Rng, content: usize, seq_len: usize, vocab: u32) -> SequenceRecord {
    let mut ids = vec![CLS];
    ids.extend((0..content).map(|_| rng.gen_range(RESERVED..vocab)));
    ids.push(SEP);
    let true_length = ids.len();
    ids.resize(seq_len, PAD);
    SequenceRecord {
        token_ids: ids,
        true_length,
    }
}

/// Observed `[mask, random, original]` fractions over at least
/// `min_selected` selected positions, and the number of positions seen.
pub fn corruption_fractions(ratios: MaskRatios, min_selected: usize, seed: u64) -> ([f64; 3], usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MaskConfig {
        mask_fraction: 0.15,
        ratios,
    };
    let mut counts = [0usize; 3];
    let mut total = 0;
    while total < min_selected {
        let records: Vec<_> = (0..64)
            .map(|_| {
                let content = rng.gen_range(20..=62);
                record(&mut rng, content, 64, 1000)
            }).collect();
        let masked = apply_mlm_mask(&records, &mut rng, &cfg, 1000).expect("valid mask config");
        for kind in masked.corruption.iter().flatten() {
            counts[match kind {
                Corruption::Mask => 0,
                Corruption::Random => 1,
                Corruption::Original => 2,
            }] += 1;
            total += 1;
        }
    }
    (counts.map(|c| c as f64 / total as f64), total)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Largest total-variation distance between Gumbel-max sample frequencies
/// and `softmax(logits)` over `vectors` random logit vectors.
pub fn gumbel_max_tv(vectors: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..vectors {
        let v = rng.gen_range(2..=12);
        let scale = rng.gen_range(0.5..3.0);
        let logits: Vec<f64> = (0..v).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut counts = vec![0usize; v];
        // chunks keep the repeated-row buffer small
        let chunk = 10_000;
        let rows: Vec<f64> = logits.iter().copied().cycle().take(chunk * v).collect();
        let mut left = draws;
        while left > 0 {
            let n = left.min(chunk);
            for id in gumbel_sample(&rows[..n * v], v, &mut rng, GumbelNoise::Sampled) {
                counts[id as usize] += 1;
            }
            left -= n;
        }
        let p = softmax(&logits);
        let tv = 0.5 * counts.iter().zip(&p).map(|(c, q)| (*c as f64 / draws as f64 - q).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

/// Random batch with a fifth of its content positions selected.
fn masked_batch(rng: &mut ChaCha8Rng, batch: usize, seq: usize, vocab: u32) -> MaskedBatch {
    let records: Vec<_> = (0..batch)
        .map(|_| {
            let content = rng.gen_range(1..=seq - 2);
            record(rng, content, seq, vocab)
        }).collect();
    let cfg = MaskConfig {
        mask_fraction: 0.2,
        ratios: MaskRatios::ELECTRA,
    };
    apply_mlm_mask(&records, rng, &cfg, vocab as usize).expect("valid mask config")
}

/// Ids within the `k` smallest distances to `query` (ties at the k-th
/// distance included), by exhaustive search.
pub fn brute_force_nearest(table: &[f32], hidden: usize, query: u32, k: usize) -> Vec<u32> {
    let v = table.len() / hidden;
    let row = |i: usize| &table[i * hidden..(i + 1) * hidden];
    let q = row(query as usize);
    let mut d: Vec<(f64, u32)> = (RESERVED as usize..v)
        .filter(|&i| i != query as usize)
        .map(|i| {
            let dist = row(i).iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
            (dist, i as u32)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0));
    let kth = d[k - 1].0;
    d.into_iter().filter(|(x, _)| *x <= kth + 1e-9).map(|(_, i)| i).collect()
}

/// Runs `trials` random top-k replacements (vocabulary up to 512, some
/// tables quantized to force distance ties) and returns how many
/// replacements were checked, or the first one outside the oracle set.
pub fn topk_oracle(trials: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for trial in 0..trials {
        let v = rng.gen_range(RESERVED as usize + 3..=512);
        let hidden = rng.gen_range(1..=16);
        let k = rng.gen_range(1..=(v - RESERVED as usize - 2).min(12));
        let quantized = trial % 3 == 0;
        let table: Vec<f32> = (0..v * hidden)
            .map(|_| {
                let x: f32 = rng.sample(StandardNormal);
                if quantized {
                    x.round()
                } else {
                    x
                }
            })
            .collect();
        let masked = masked_batch(&mut rng, 2, 12, v as u32);
        let (targets, repl) = topk_replace(&masked, &table, hidden, k, &mut rng).map_err(|e| e.to_string())?;
        for ((flat, orig), r) in masked.selected_flat().into_iter().zip(masked.selected_originals()).zip(&repl) {
            let allowed = brute_force_nearest(&table, hidden, orig, k);
            if !allowed.contains(r) || targets.ids[flat] != *r || targets.labels[flat] != 1.0 {
                return Err(format!("trial {trial}: {orig} -> {r} not among {allowed:?} (k {k}, V {v})"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Mean and variance of the noise at selected positions, and the largest
/// magnitude anywhere else.
pub fn noise_statistics(sigma: f64, seed: u64) -> (f64, f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = 16;
    let (mut sum, mut sq, mut n, mut outside) = (0.0, 0.0, 0usize, 0.0f64);
    for _ in 0..50 {
        let masked = masked_batch(&mut rng, 8, 32, 200);
        let (_, noise) = noise_replace::<f64, _>(&masked, hidden, sigma, &mut rng).expect("valid sigma");
        let selected: std::collections::HashSet<usize> = masked.selected_flat().into_iter().collect();
        for (flat, row) in noise.data().chunks(hidden).enumerate() {
            if selected.contains(&flat) {
                for x in row {
                    sum += x;
                    sq += x * x;
                    n += 1;
                }
            } else {
                outside = row.iter().fold(outside, |m, x| m.max(x.abs()));
            }
        }
    }
    let mean = sum / n as f64;
    (mean, sq / n as f64 - mean * mean, outside)
}
