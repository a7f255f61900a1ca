//! RTD discriminator with optional section early exit.
//!
//! The trunk is split into `n_sections` equal blocks. Each block ends in its
//! own sigmoid head `D(x, t) = sigmoid(w_s . h_t + b_s)`; the head of the last
//! section is the ordinary top head.

use serde::{Deserialize, Serialize};

use crate::encoder::{attention_mask, EncoderDims, EncoderLayer, Embeddings};
use crate::error::{ModelError, ModelResult};
use crate::numerics::{Init, Initializer, ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub n_layers: usize,
    pub n_sections: usize,
    pub early_exit: bool,
    /// Reuse the generator's trunk layers (same parameter storage).
    pub share_params_with_gen: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_sections: 4,
            early_exit: false,
            share_params_with_gen: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.n_layers == 0 || self.n_sections == 0 || self.n_layers % self.n_sections != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "{} discriminator layers cannot form {} equal sections",
                self.n_layers, self.n_sections
            )));
        }
        Ok(())
    }

    pub fn layers_per_section(&self) -> usize {
        self.n_layers / self.n_sections
    }
}

/// Corrupted ids with per-position RTD labels (1 = replaced) and loss
/// weights (0 at padding).
#[derive(Debug, Clone, PartialEq)]
pub struct RtdTargets {
    pub ids: Vec<u32>,
    pub labels: Vec<f32>,
    pub weights: Vec<f32>,
}

impl RtdTargets {
    pub fn n_content(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    pub fn n_replaced(&self) -> usize {
        self.labels.iter().zip(&self.weights).filter(|(l, w)| **l == 1.0 && **w > 0.0).count()
    }
}

/// What the discriminator reads: token ids, or token ids whose embeddings
/// are perturbed by an additive `[batch, seq, hidden]` tensor.
#[derive(Debug, Clone)]
pub enum DiscInput<'a, T: Real> {
    Ids(&'a [u32]),
    Noised { ids: &'a [u32], noise: Tensor<T> },
}

#[derive(Debug, Clone, Copy)]
pub struct RtdHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    dims: EncoderDims,
    embed: Embeddings,
    layers: Vec<EncoderLayer>,
    heads: Vec<RtdHead>,
}

/// Hidden states at the end of each section computed so far.
#[derive(Debug, Clone)]
pub struct DiscPass {
    pub sections: Vec<Var>,
    mask: Var,
}

impl DiscPass {
    pub fn depth(&self) -> usize {
        self.sections.len()
    }
}

impl Discriminator {
    /// Builds the discriminator. With `share_params_with_gen`, `shared` must
    /// hold exactly `n_layers` generator layers, which become this trunk.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &Initializer,
        cfg: DiscriminatorConfig,
        dims: EncoderDims,
        embed: Embeddings,
        shared: Option<&[EncoderLayer]>,
    ) -> ModelResult<Self> {
        cfg.validate()?;
        let layers = match (cfg.share_params_with_gen, shared) {
            (true, Some(l)) if l.len() == cfg.n_layers => l.to_vec(),
            (true, _) => {
                return Err(ModelError::InvalidConfig(format!(
                    "sharing needs exactly {} generator layers",
                    cfg.n_layers
                )))
            }
            (false, _) => (0..cfg.n_layers)
                .map(|i| EncoderLayer::new(store, init, &format!("disc.layer{i}"), dims))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let mut heads = Vec::with_capacity(cfg.n_sections);
        for s in 1..=cfg.n_sections {
            let name = if s == cfg.n_sections { "disc.head".to_string() } else { format!("disc.section{s}") };
            heads.push(RtdHead {
                w: store.init(init, &format!("{name}.w"), &[dims.hidden, 1], Init::Normal(crate::encoder::INIT_STD))?,
                b: store.init(init, &format!("{name}.b"), &[1], Init::Zeros)?,
            });
        }
        Ok(Self {
            cfg,
            dims,
            embed,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn heads(&self) -> &[RtdHead] {
        &self.heads
    }

    pub fn n_sections(&self) -> usize {
        self.cfg.n_sections
    }

    /// Embeds the input and runs sections `1..=upto_section` (all when
    /// `None`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: DiscInput<'_, T>,
        lengths: &[usize],
        batch: usize,
        seq: usize,
        upto_section: Option<usize>,
    ) -> ModelResult<DiscPass> {
        let (ids, noise) = match input {
            DiscInput::Ids(ids) => (ids, None),
            DiscInput::Noised { ids, noise } => (ids, Some(noise)),
        };
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = self.embed.forward(tape, store, &ids, batch, seq, noise)?;
        let mask = tape.constant(attention_mask(lengths, seq, self.dims.heads))?;
        let mut pass = DiscPass {
            sections: Vec::new(),
            mask,
        };
        self.run_sections(tape, store, &mut pass, x, upto_section.unwrap_or(self.cfg.n_sections))?;
        Ok(pass)
    }

    /// Continues a pass to `upto_section`. With `detach` the continuation
    /// starts from a gradient-free copy, so deeper sections are evaluated
    /// without training the shallower ones.
    pub fn extend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pass: &mut DiscPass,
        upto_section: usize,
        detach: bool,
    ) -> ModelResult<()> {
        let Some(&last) = pass.sections.last() else {
            return Err(ModelError::InvalidConfig("cannot extend an empty pass".into()));
        };
        let x = if detach { tape.detach(last)? } else { last };
        self.run_sections(tape, store, pass, x, upto_section)
    }

    fn run_sections<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pass: &mut DiscPass,
        mut x: Var,
        upto: usize,
    ) -> ModelResult<()> {
        if upto == 0 || upto > self.cfg.n_sections {
            return Err(ModelError::InvalidConfig(format!(
                "section {upto} outside 1..={}",
                self.cfg.n_sections
            )));
        }
        let per = self.cfg.layers_per_section();
        for s in pass.sections.len()..upto {
            for layer in &self.layers[s * per..(s + 1) * per] {
                x = layer.forward(tape, store, x, pass.mask, self.dims.heads)?;
            }
            pass.sections.push(x);
        }
        Ok(())
    }

    /// RTD logits `[batch, seq]` from the head of `section` (1-based).
    pub fn section_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, pass: &DiscPass, section: usize) -> ModelResult<Var> {
        let h = *pass
            .sections
            .get(section.wrapping_sub(1))
            .ok_or_else(|| ModelError::InvalidConfig(format!("section {section} was not computed")))?;
        let head = self.heads[section - 1];
        let w = tape.param(store, head.w)?;
        let b = tape.param(store, head.b)?;
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        let shape = tape.shape(h)[..2].to_vec();
        Ok(tape.reshape(z, &shape)?)
    }
}

/// Mean binary cross-entropy over weighted (non-pad) positions.
pub fn rtd_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &RtdTargets) -> ModelResult<Var> {
    if targets.weights.iter().all(|w| *w == 0.0) {
        return Err(ModelError::NoContent);
    }
    let labels: Vec<T> = targets.labels.iter().map(|l| T::lit(*l as f64)).collect();
    let weights: Vec<T> = targets.weights.iter().map(|w| T::lit(*w as f64)).collect();
    Ok(tape.bce_with_logits(logits, &labels, &weights)?)
}

/// `(correct, counted)` over weighted positions; a logit of 0 predicts
/// "replaced", as `round(0.5) = 1`.
pub fn rtd_accuracy<T: Real>(logits: &[T], targets: &RtdTargets) -> (usize, usize) {
    let mut correct = 0;
    let mut counted = 0;
    for ((z, l), w) in logits.iter().zip(&targets.labels).zip(&targets.weights) {
        if *w > 0.0 {
            counted += 1;
            if (*z >= T::zero()) == (*l == 1.0) {
                correct += 1;
            }
        }
    }
    (correct, counted)
}

/// Threshold and 1-based active section for one window of per-section
/// accuracies: the first section strictly above the mean, else the last.
pub fn select_section(accs: &[f64]) -> (f64, usize) {
    let threshold = accs.iter().sum::<f64>() / accs.len() as f64;
    let active = accs.iter().position(|a| *a > threshold).map_or(accs.len(), |i| i + 1);
    (threshold, active)
}

/// Early-exit bookkeeping, updated once per accuracy window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionState {
    pub active: usize,
    pub threshold: Option<f64>,
    pub last_accs: Vec<f64>,
    correct: Vec<u64>,
    counted: Vec<u64>,
}

impl SectionState {
    /// Starts with the full trunk active.
    pub fn new(n_sections: usize) -> Self {
        Self {
            active: n_sections,
            threshold: None,
            last_accs: Vec::new(),
            correct: vec![0; n_sections],
            counted: vec![0; n_sections],
        }
    }

    pub fn n_sections(&self) -> usize {
        self.correct.len()
    }

    /// Adds one evaluation of section `section` (1-based).
    pub fn record(&mut self, section: usize, correct: usize, counted: usize) {
        self.correct[section - 1] += correct as u64;
        self.counted[section - 1] += counted as u64;
    }

    /// Current window accuracy per section; `None` for sections without
    /// evaluations.
    pub fn window_accs(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.counted)
            .map(|(c, n)| (*n > 0).then(|| *c as f64 / *n as f64))
            .collect()
    }

    /// Applies [`select_section`] to the window and resets the counters. A
    /// window where some section has no evaluations leaves the state as is.
    pub fn update_section_exit(&mut self) -> Option<(f64, usize)> {
        let accs: Option<Vec<f64>> = self.window_accs().into_iter().collect();
        self.correct.iter_mut().for_each(|c| *c = 0);
        self.counted.iter_mut().for_each(|c| *c = 0);
        let accs = accs?;
        let (threshold, active) = select_section(&accs);
        self.threshold = Some(threshold);
        self.active = active;
        self.last_accs = accs;
        Some((threshold, active))
    }
}
