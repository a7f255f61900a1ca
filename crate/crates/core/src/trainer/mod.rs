//! Joint generator/discriminator training for the five model variants.
//!
//! Every step minimises `L_MLM + lambda * L_Disc`, plus the embedding
//! distance term in the top-k embedding variant. Accuracy windows drive the
//! exit controller (adaptive generator) and the section rule (early-exit
//! discriminator).

mod checkpoint;
mod config;
mod metrics;
mod optim;
mod throughput;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use config::{parse_pairs, ModelDims, OptimConfig, TrainConfig, Variant, CONFIG_KEYS};
pub use metrics::{MetricsWindow, StepMetrics, Tally, WindowAccumulator};
pub use optim::Adam;
pub use throughput::{bench_config, measure_throughput, ThroughputRow, ThroughputTable};

use crate::data::{Batcher, DataError, RecordStore, SequenceRecord};
use crate::discriminator::{rtd_accuracy, rtd_loss, DiscInput, Discriminator, RtdTargets, SectionState};
use crate::emb_gen::{aux_embedding_loss, noise_replace, topk_replace, EmbeddingSource, ReplacementMode};
use crate::encoder::{EncoderDims, Embeddings};
use crate::error::ModelError;
use crate::exit_controller::{ControllerError, ExitDistribution};
use crate::generator::{argmax_hits, build_discriminator_input, gumbel_sample, mlm_loss, Generator, GumbelNoise};
use crate::masking::{apply_mlm_mask, MaskError, MaskedBatch};
use crate::numerics::{ContainerError, Initializer, NumericsError, ParamStore, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] ContainerError),
    #[error("checkpoint tensor {name} has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint metadata: {0}")]
    CheckpointMetadata(String),
    #[error("non-finite value at step {step} ({detail}); batch dumped to {dump}")]
    NonFinite { step: usize, detail: String, dump: String },
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

/// All parameters of one variant plus the networks that index into them.
#[derive(Debug)]
pub struct Model {
    pub store: ParamStore<f32>,
    pub embed: Embeddings,
    pub gen: Option<Generator>,
    pub disc: Discriminator,
    pub dims: EncoderDims,
    pub vocab: usize,
    pub max_len: usize,
}

impl Model {
    pub fn build(cfg: &TrainConfig, vocab: usize, max_len: usize) -> TrainResult<Self> {
        cfg.validate()?;
        let init = Initializer::new(cfg.seed);
        let dims = EncoderDims {
            hidden: cfg.model.hidden,
            heads: cfg.model.heads,
            ffn: cfg.model.ffn,
        };
        let mut store = ParamStore::new();
        let embed = Embeddings::new(&mut store, &init, vocab, max_len, dims.hidden)?;
        let gen = match cfg.variant.has_generator() {
            true => Some(Generator::new(&mut store, &init, cfg.gen.clone(), dims, embed, vocab)?),
            false => None,
        };
        let shared = match cfg.disc.share_params_with_gen {
            true => gen.as_ref().map(Generator::layers),
            false => None,
        };
        let disc = Discriminator::new(&mut store, &init, cfg.disc.clone(), dims, embed, shared)?;
        Ok(Self {
            store,
            embed,
            gen,
            disc,
            dims,
            vocab,
            max_len,
        })
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Independent random streams, so instrumentation never perturbs training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Streams {
    mask: ChaCha8Rng,
    sample: ChaCha8Rng,
    exit: ChaCha8Rng,
    replace: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            mask: stream(seed, 1),
            sample: stream(seed, 2),
            exit: stream(seed, 3),
            replace: stream(seed, 4),
            eval: stream(seed, 5),
        }
    }
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a RecordStore,
    model: Model,
    adam: Adam,
    batcher: Batcher,
    streams: Streams,
    controller: Option<ExitDistribution>,
    sections: Option<SectionState>,
    step: usize,
    window: WindowAccumulator,
    window_started: Instant,
    history: Vec<MetricsWindow>,
    sink: Option<BufWriter<File>>,
}

/// Discriminator input chosen for one step.
enum Corrupted {
    Ids(RtdTargets),
    Noised(RtdTargets, crate::numerics::Tensor<f32>),
}

impl Corrupted {
    fn targets(&self) -> &RtdTargets {
        match self {
            Corrupted::Ids(t) | Corrupted::Noised(t, _) => t,
        }
    }
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a RecordStore) -> TrainResult<Self> {
        let mut model = Model::build(&cfg, data.vocab_size(), data.max_seq_len())?;
        if !cfg.variant.has_generator() {
            cfg.embgen.validate(model.vocab)?;
            if cfg.embgen.embedding_source == EmbeddingSource::Frozen {
                checkpoint::load_frozen_embeddings(&cfg, &mut model)?;
            }
        }
        let adam = Adam::new(cfg.optim.clone(), &model.store, cfg.steps);
        let batcher = Batcher::new(data.len(), cfg.batch_size, cfg.seed)?;
        let controller = match cfg.variant {
            Variant::AdaptiveGen => Some(ExitDistribution::new(&cfg.ctrl)?),
            _ => None,
        };
        let sections = cfg.disc.early_exit.then(|| SectionState::new(cfg.disc.n_sections));
        let sink = open_sink(&cfg, false)?;
        Ok(Self {
            streams: Streams::new(cfg.seed),
            cfg,
            data,
            model,
            adam,
            batcher,
            controller,
            sections,
            step: 0,
            window: WindowAccumulator::new(1),
            window_started: Instant::now(),
            history: Vec::new(),
            sink,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[MetricsWindow] {
        &self.history
    }

    pub fn controller(&self) -> Option<&ExitDistribution> {
        self.controller.as_ref()
    }

    pub fn sections(&self) -> Option<&SectionState> {
        self.sections.as_ref()
    }

    /// Runs until `cfg.steps`, closing windows and writing checkpoints on
    /// the way.
    pub fn run(&mut self) -> TrainResult<()> {
        while self.step < self.cfg.steps {
            self.train_step()?;
        }
        if let Some(dir) = self.cfg.checkpoint_dir.clone() {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// Runs `n` more steps.
    pub fn run_steps(&mut self, n: usize) -> TrainResult<()> {
        for _ in 0..n {
            self.train_step()?;
        }
        Ok(())
    }

    /// One optimizer update. Closes the window when it is full.
    pub fn train_step(&mut self) -> TrainResult<StepMetrics> {
        let step = self.step + 1;
        let records = self.batcher.next_batch(self.data);
        let masked = apply_mlm_mask(&records, &mut self.streams.mask, &self.cfg.mask, self.model.vocab)?;
        let metrics = match self.step_inner(step, &masked) {
            Ok(m) => m,
            Err(ModelError::Numerics(NumericsError::NonFinite { op })) => {
                return Err(self.dump_batch(step, &records, format!("op {op}")));
            }
            Err(e) => return Err(e.into()),
        };
        if !metrics.loss_total.is_finite() {
            return Err(self.dump_batch(step, &records, "loss".into()));
        }
        self.step = step;
        self.window.push(&metrics);
        if step % self.cfg.window == 0 {
            self.close_window()?;
        }
        if self.cfg.checkpoint_every > 0 && step % self.cfg.checkpoint_every == 0 {
            if let Some(dir) = self.cfg.checkpoint_dir.clone() {
                self.save_checkpoint(&dir.join(format!("step{step}.ckpt")))?;
            }
        }
        Ok(metrics)
    }

    fn step_inner(&mut self, step: usize, masked: &MaskedBatch) -> Result<StepMetrics, ModelError> {
        let cfg = &self.cfg;
        let model = &self.model;
        let store = &model.store;
        let mut tape = Tape::<f32>::new();
        let mut m = StepMetrics::default();
        let mut total: Option<Var> = None;
        let mut add = |tape: &mut Tape<f32>, v: Var, w: f64| -> Result<(), ModelError> {
            let v = if w == 1.0 { v } else { tape.scale(v, w)? };
            total = Some(match total {
                None => v,
                Some(t) => tape.add(t, v)?,
            });
            Ok(())
        };

        let corrupted = if let Some(gen) = &model.gen {
            let n_exits = gen.n_exits();
            let exit = match &self.controller {
                Some(c) => c.sample_exit(&mut self.streams.exit),
                None => n_exits - 1,
            };
            m.exit = Some(exit);
            let skip = cfg.gen.skip_above_exit;
            let pass = gen.forward(&mut tape, store, masked, skip.then_some(exit))?;
            let rows = masked.selected_flat();
            let labels: Vec<usize> = masked.selected_originals().iter().map(|&i| i as usize).collect();
            let trained: Vec<usize> = if skip { vec![exit] } else { (0..n_exits).collect() };
            let logits = trained
                .iter()
                .map(|&j| gen.exit_logits(&mut tape, store, &pass, j, &rows))
                .collect::<Result<Vec<_>, _>>()?;
            let weights = if skip { vec![1.0] } else { cfg.gen.exit_loss_weights.clone() };
            let mlm = mlm_loss(&mut tape, &logits, &labels, &weights)?;
            m.loss_mlm = tape.value(mlm.total)[0] as f64;
            add(&mut tape, mlm.total, 1.0)?;

            m.mlm_per_exit = vec![None; n_exits];
            for (&j, l) in trained.iter().zip(&logits) {
                m.mlm_per_exit[j] = Some((argmax_hits(tape.value(*l), model.vocab, &labels), labels.len()));
            }
            let chosen = logits[trained.iter().position(|&j| j == exit).expect("sampled exit is trained")];
            let sampled = gumbel_sample(tape.value(chosen), model.vocab, &mut self.streams.sample, GumbelNoise::Sampled);

            if cfg.exit_eval_every > 0 && step % cfg.exit_eval_every == 0 {
                m.rtd_per_exit = vec![None; n_exits];
                for (&j, l) in trained.iter().zip(&logits) {
                    let s = gumbel_sample(tape.value(*l), model.vocab, &mut self.streams.eval, GumbelNoise::Sampled);
                    let t = build_discriminator_input(masked, &s);
                    let mut eval = Tape::new();
                    let p = model.disc.forward(&mut eval, store, DiscInput::Ids(&t.ids), &masked.true_lengths, masked.batch, masked.seq_len, None)?;
                    let z = model.disc.section_logits(&mut eval, store, &p, model.disc.n_sections())?;
                    m.rtd_per_exit[j] = Some(rtd_accuracy(eval.value(z), &t));
                }
            }
            Corrupted::Ids(build_discriminator_input(masked, &sampled))
        } else {
            let hidden = model.dims.hidden;
            match cfg.embgen.mode {
                ReplacementMode::TopK => {
                    let table = store.get(model.embed.tokens).data();
                    let (targets, repl) = topk_replace(masked, table, hidden, cfg.embgen.k, &mut self.streams.replace)?;
                    if cfg.embgen.embedding_source == EmbeddingSource::Live && cfg.embgen.aux_loss_coeff > 0.0 {
                        let tv = tape.param(store, model.embed.tokens)?;
                        let aux = aux_embedding_loss(&mut tape, tv, &masked.selected_originals(), &repl)?;
                        m.loss_aux = tape.value(aux)[0] as f64;
                        add(&mut tape, aux, cfg.embgen.aux_loss_coeff)?;
                    }
                    Corrupted::Ids(targets)
                }
                ReplacementMode::Noise => {
                    let (targets, noise) = noise_replace(masked, hidden, cfg.embgen.noise_sigma, &mut self.streams.replace)?;
                    Corrupted::Noised(targets, noise)
                }
            }
        };

        let targets = corrupted.targets().clone();
        m.replaced = targets.n_replaced();
        m.content = targets.n_content();
        let input = match corrupted {
            Corrupted::Ids(_) => DiscInput::Ids(&targets.ids),
            Corrupted::Noised(_, noise) => DiscInput::Noised { ids: &targets.ids, noise },
        };
        let disc = &model.disc;
        let n_sections = disc.n_sections();
        let active = self.sections.as_ref().map_or(n_sections, |s| s.active);
        let mut pass = disc.forward(&mut tape, store, input, &masked.true_lengths, masked.batch, masked.seq_len, Some(active))?;

        // early exit trains every head up to the active section
        let trained_heads: Vec<usize> = if cfg.disc.early_exit { (1..=active).collect() } else { vec![n_sections] };
        let mut disc_losses = Vec::with_capacity(trained_heads.len());
        if cfg.disc.early_exit {
            m.rtd_per_section = vec![None; n_sections];
        }
        for &s in &trained_heads {
            let z = disc.section_logits(&mut tape, store, &pass, s)?;
            let tally = rtd_accuracy(tape.value(z), &targets);
            if cfg.disc.early_exit {
                m.rtd_per_section[s - 1] = Some(tally);
            }
            if s == active {
                m.rtd = tally;
            }
            disc_losses.push(rtd_loss(&mut tape, z, &targets)?);
        }
        let mut l_disc = disc_losses[0];
        for l in &disc_losses[1..] {
            l_disc = tape.add(l_disc, *l)?;
        }
        if disc_losses.len() > 1 {
            l_disc = tape.scale(l_disc, 1.0 / disc_losses.len() as f64)?;
        }
        m.loss_disc = tape.value(l_disc)[0] as f64;
        if cfg.lambda > 0.0 {
            add(&mut tape, l_disc, cfg.lambda)?;
        }
        drop(add);
        m.loss_total = m.loss_mlm + cfg.lambda * m.loss_disc + cfg.embgen.aux_loss_coeff * m.loss_aux;

        if cfg.disc.early_exit && active < n_sections && cfg.section_eval_every > 0 && step % cfg.section_eval_every == 0 {
            disc.extend(&mut tape, store, &mut pass, n_sections, true)?;
            for s in active + 1..=n_sections {
                let z = disc.section_logits(&mut tape, store, &pass, s)?;
                m.rtd_per_section[s - 1] = Some(rtd_accuracy(tape.value(z), &targets));
            }
        }

        if let Some(total) = total {
            let grads = tape.backward(total)?;
            m.grad_norm = self.adam.apply(&mut self.model.store, &grads);
        }
        if let Some(st) = self.sections.as_mut() {
            for (s, t) in m.rtd_per_section.iter().enumerate() {
                if let Some((c, n)) = t {
                    st.record(s + 1, *c, *n);
                }
            }
        }
        Ok(m)
    }

    /// Closes the open window: computes means, feeds the controller or the
    /// section rule, and appends the record to the log.
    pub fn close_window(&mut self) -> TrainResult<MetricsWindow> {
        let elapsed = self.window_started.elapsed().as_secs_f64();
        let mut w = self.window.close(self.step, self.cfg.variant.name(), elapsed);
        if let Some(c) = self.controller.as_mut() {
            if let Some(u) = c.update(w.rtd_acc)? {
                w.controller_diff = Some(u.diff);
            }
            w.p_vector = c.probabilities().to_vec();
        }
        if let Some(s) = self.sections.as_mut() {
            s.update_section_exit();
            w.active_section = Some(s.active);
            w.threshold = s.threshold;
        }
        if let Some(sink) = self.sink.as_mut() {
            let line = serde_json::to_string(&w).expect("metrics serialize");
            writeln!(sink, "{line}").and_then(|_| sink.flush()).map_err(|e| TrainError::Io {
                path: self.cfg.metrics.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                source: e,
            })?;
        }
        log::info!(
            "{} step {}: loss {:.4} rtd_acc {:.4} {:.2} steps/s",
            w.variant,
            w.step,
            w.loss_total,
            w.rtd_acc,
            w.steps_per_sec
        );
        self.history.push(w.clone());
        self.window = WindowAccumulator::new(self.step + 1);
        self.window_started = Instant::now();
        Ok(w)
    }

    fn dump_batch(&self, step: usize, records: &[SequenceRecord], detail: String) -> TrainError {
        let dir = self
            .cfg
            .metrics
            .as_ref()
            .and_then(|p| p.parent().map(PathBuf::from))
            .or_else(|| self.cfg.checkpoint_dir.clone())
            .unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nonfinite-step{step}.json"));
        let body = serde_json::json!({
            "step": step,
            "variant": self.cfg.variant.name(),
            "detail": detail,
            "token_ids": records.iter().map(|r| &r.token_ids).collect::<Vec<_>>(),
            "true_lengths": records.iter().map(|r| r.true_length).collect::<Vec<_>>(),
        });
        let dump = match std::fs::write(&path, body.to_string()) {
            Ok(()) => path.display().to_string(),
            Err(e) => format!("<dump failed: {e}>"),
        };
        log::error!("non-finite value at step {step}: {detail}");
        TrainError::NonFinite { step, detail, dump }
    }
}

fn open_sink(cfg: &TrainConfig, append: bool) -> TrainResult<Option<BufWriter<File>>> {
    let Some(path) = &cfg.metrics else { return Ok(None) };
    let io = |e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io)?;
    Ok(Some(BufWriter::new(file)))
}
