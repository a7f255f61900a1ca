//! Multi-exit MLM generator.
//!
//! The trunk is a plain encoder stack. Each exit layer owns a head that maps
//! hidden states at the selected positions to vocabulary logits through the
//! tied token-embedding matrix. With `concat_exit_heads` the head of exit `j`
//! reads the concatenation of the snapshots at exits `1..=j`; the trunk
//! itself is never altered by the heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::RtdTargets;
use crate::encoder::{attention_mask, EncoderDims, EncoderLayer, Embeddings, LayerNorm, Linear};
use crate::error::{ModelError, ModelResult};
use crate::masking::MaskedBatch;
use crate::numerics::{Init, Initializer, ParamId, ParamStore, Real, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_layers: usize,
    /// 1-based trunk layers carrying an exit head, ascending, ending at
    /// `n_layers`.
    pub exit_layers: Vec<usize>,
    pub exit_loss_weights: Vec<f64>,
    pub concat_exit_heads: bool,
    /// Stop the trunk at the sampled exit and train only that head.
    pub skip_above_exit: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            exit_layers: vec![1, 2, 3, 4],
            exit_loss_weights: vec![0.1, 0.2, 0.3, 0.4],
            concat_exit_heads: true,
            skip_above_exit: false,
        }
    }
}

impl GeneratorConfig {
    /// Single exit at the top layer.
    pub fn top_only(n_layers: usize) -> Self {
        Self {
            n_layers,
            exit_layers: vec![n_layers],
            exit_loss_weights: vec![1.0],
            concat_exit_heads: false,
            skip_above_exit: false,
        }
    }

    pub fn validate(&self) -> ModelResult<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 {
            return bad("generator needs at least one layer".into());
        }
        if self.exit_layers.is_empty() || self.exit_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("exit layers must be strictly ascending: {:?}", self.exit_layers));
        }
        if self.exit_layers[0] == 0 || *self.exit_layers.last().unwrap() != self.n_layers {
            return bad(format!(
                "exit layers must lie in 1..={} and end at the top layer: {:?}",
                self.n_layers, self.exit_layers
            ));
        }
        if self.exit_loss_weights.len() != self.exit_layers.len()
            || self.exit_loss_weights.iter().any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return bad(format!(
                "need one positive loss weight per exit, got {:?}",
                self.exit_loss_weights
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExitHead {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub out_bias: ParamId,
    pub input_width: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    dims: EncoderDims,
    embed: Embeddings,
    layers: Vec<EncoderLayer>,
    exits: Vec<ExitHead>,
}

/// Hidden-state snapshots `[batch, seq, hidden]`, one per exit reached.
#[derive(Debug, Clone)]
pub struct GeneratorPass {
    pub snapshots: Vec<Var>,
}

impl Generator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        cfg: GeneratorConfig,
        dims: EncoderDims,
        embed: Embeddings,
        vocab: usize,
    ) -> ModelResult<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(store, init, &format!("gen.layer{i}"), dims))
            .collect::<Result<Vec<_>, _>>()?;
        let mut exits = Vec::with_capacity(cfg.exit_layers.len());
        for (j, layer) in cfg.exit_layers.iter().enumerate() {
            let name = format!("gen.exit{layer}");
            let input_width = if cfg.concat_exit_heads { (j + 1) * dims.hidden } else { dims.hidden };
            exits.push(ExitHead {
                proj: Linear::new(store, init, &format!("{name}.proj"), input_width, dims.hidden)?,
                norm: LayerNorm::new(store, init, &format!("{name}.norm"), dims.hidden)?,
                out_bias: store.init(init, &format!("{name}.out_bias"), &[vocab], Init::Zeros)?,
                input_width,
            });
        }
        Ok(Self {
            cfg,
            dims,
            embed,
            layers,
            exits,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn exits(&self) -> &[ExitHead] {
        &self.exits
    }

    pub fn n_exits(&self) -> usize {
        self.exits.len()
    }

    /// Runs the trunk on the masked input, recording a snapshot at every exit
    /// up to and including `upto_exit` (all exits when `None`). Layers above
    /// that exit are not computed.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        masked: &MaskedBatch,
        upto_exit: Option<usize>,
    ) -> ModelResult<GeneratorPass> {
        let last = upto_exit.unwrap_or(self.exits.len() - 1);
        if last >= self.exits.len() {
            return Err(ModelError::InvalidConfig(format!("exit index {last} out of range")));
        }
        let (b, t) = (masked.batch, masked.seq_len);
        let ids: Vec<usize> = masked.input_ids.iter().map(|&i| i as usize).collect();
        let mut x = self.embed.forward(tape, store, &ids, b, t, None)?;
        let mask = tape.constant(attention_mask(&masked.true_lengths, t, self.dims.heads))?;

        let depth = self.cfg.exit_layers[last];
        let mut snapshots = Vec::with_capacity(last + 1);
        let mut next_exit = 0;
        for (i, layer) in self.layers.iter().take(depth).enumerate() {
            x = layer.forward(tape, store, x, mask, self.dims.heads)?;
            if next_exit <= last && self.cfg.exit_layers[next_exit] == i + 1 {
                snapshots.push(x);
                next_exit += 1;
            }
        }
        Ok(GeneratorPass { snapshots })
    }

    /// Vocabulary logits `[rows.len(), V]` of exit `exit` at flat positions
    /// `rows`.
    pub fn exit_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pass: &GeneratorPass,
        exit: usize,
        rows: &[usize],
    ) -> ModelResult<Var> {
        if exit >= pass.snapshots.len() {
            return Err(ModelError::InvalidConfig(format!(
                "exit {exit} was not computed ({} snapshots)",
                pass.snapshots.len()
            )));
        }
        let head = &self.exits[exit];
        let input = if self.cfg.concat_exit_heads {
            let parts = pass.snapshots[..=exit]
                .iter()
                .map(|s| tape.gather_rows(*s, rows))
                .collect::<Result<Vec<_>, _>>()?;
            tape.concat(&parts)?
        } else {
            tape.gather_rows(pass.snapshots[exit], rows)?
        };
        let h = head.proj.forward(tape, store, input)?;
        let h = tape.gelu(h)?;
        let h = head.norm.forward(tape, store, h)?;
        let table = tape.param(store, self.embed.tokens)?;
        let logits = tape.matmul_nt(h, table)?;
        let bias = tape.param(store, head.out_bias)?;
        Ok(tape.add(logits, bias)?)
    }
}

/// Noise source for [`gumbel_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GumbelNoise {
    Sampled,
    /// Forces `g = 0`: plain argmax. Test hook.
    Zero,
}

/// Draws one id per row of `logits[n, vocab]` as `argmax(logits + g)` with
/// `g = -ln(-ln U)`, `U ~ Uniform(0, 1)`; equivalent to sampling from
/// `softmax(logits)`. Draws of exactly 0 or 1 are redrawn.
pub fn gumbel_sample<T: Real, R: Rng + ?Sized>(logits: &[T], vocab: usize, rng: &mut R, noise: GumbelNoise) -> Vec<u32> {
    assert!(vocab > 0 && logits.len() % vocab == 0, "logits must be [n, vocab]");
    logits
        .chunks(vocab)
        .map(|row| {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (k, l) in row.iter().enumerate() {
                let g = match noise {
                    GumbelNoise::Zero => 0.0,
                    GumbelNoise::Sampled => {
                        let u = loop {
                            let u: f64 = rng.gen();
                            if u > 0.0 && u < 1.0 {
                                break u;
                            }
                        };
                        -(-u.ln()).ln()
                    }
                };
                let score = l.as_f64() + g;
                if score > best.0 {
                    best = (score, k);
                }
            }
            best.1 as u32
        })
        .collect()
}

/// Weighted MLM objective and its per-exit cross-entropies.
#[derive(Debug, Clone)]
pub struct MlmLoss {
    pub total: Var,
    pub per_exit: Vec<Var>,
}

/// `sum_j w_j * CE(logits_j, labels)` with `w` normalized to sum to 1.
pub fn mlm_loss<T: Real>(tape: &mut Tape<T>, exit_logits: &[Var], labels: &[usize], weights: &[f64]) -> ModelResult<MlmLoss> {
    if labels.is_empty() {
        return Err(ModelError::NoLabels);
    }
    if exit_logits.is_empty() || exit_logits.len() != weights.len() {
        return Err(ModelError::InvalidConfig(format!(
            "{} exit logits but {} weights",
            exit_logits.len(),
            weights.len()
        )));
    }
    let norm: f64 = weights.iter().sum();
    let mut per_exit = Vec::with_capacity(exit_logits.len());
    let mut total: Option<Var> = None;
    for (logits, w) in exit_logits.iter().zip(weights) {
        let lp = tape.log_softmax(*logits)?;
        let picked = tape.pick(lp, labels)?;
        let mean = tape.mean(picked)?;
        let ce = tape.scale(mean, -1.0)?;
        per_exit.push(ce);
        let term = tape.scale(ce, w / norm)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(MlmLoss {
        total: total.expect("at least one exit"),
        per_exit,
    })
}

/// Writes `sampled` into the selected positions. A position is labelled
/// replaced only when the sample differs from the original token; padding
/// carries zero weight.
pub fn build_discriminator_input(masked: &MaskedBatch, sampled: &[u32]) -> RtdTargets {
    assert_eq!(sampled.len(), masked.n_selected(), "one sample per selected position");
    let mut ids = masked.source_ids.clone();
    let mut labels = vec![0.0f32; ids.len()];
    for ((flat, orig), s) in masked.selected_flat().into_iter().zip(masked.selected_originals()).zip(sampled) {
        ids[flat] = *s;
        if *s != orig {
            labels[flat] = 1.0;
        }
    }
    RtdTargets {
        ids,
        labels,
        weights: masked.content_weights(),
    }
}

/// Number of rows of `logits[n, vocab]` whose argmax equals the label.
pub fn argmax_hits<T: Real>(logits: &[T], vocab: usize, labels: &[usize]) -> usize {
    logits
        .chunks(vocab)
        .zip(labels)
        .filter(|(row, l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (k, x)| if *x > acc.1 { (k, *x) } else { acc });
            best.0 == **l
        })
        .count()
}
