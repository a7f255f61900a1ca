//! Training configuration and its flat `section.key = value` text form.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::emb_gen::{EmbeddingSource, ReplacementConfig, ReplacementMode};
use crate::exit_controller::ControllerConfig;
use crate::generator::GeneratorConfig;
use crate::masking::{MaskConfig, MaskRatios};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Embgen,
    EmbgenPretrained,
    EarlyExitDisc,
    AdaptiveGen,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Embgen,
        Variant::EmbgenPretrained,
        Variant::EarlyExitDisc,
        Variant::AdaptiveGen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Embgen => "embgen",
            Variant::EmbgenPretrained => "embgen-pretrained",
            Variant::EarlyExitDisc => "early-exit-disc",
            Variant::AdaptiveGen => "adaptive-gen",
        }
    }

    /// Whether the variant trains an MLM generator at all.
    pub fn has_generator(self) -> bool {
        !matches!(self, Variant::Embgen | Variant::EmbgenPretrained)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            ffn: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub window: usize,
    /// Score samples from every generator exit each `n` steps (0 = never).
    pub exit_eval_every: usize,
    /// Evaluate sections above the active one each `n` steps.
    pub section_eval_every: usize,
    pub store: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub model: ModelDims,
    pub optim: OptimConfig,
    pub mask: MaskConfig,
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub ctrl: ControllerConfig,
    pub embgen: ReplacementConfig,
}

impl TrainConfig {
    /// Defaults with the wiring of `variant` applied.
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = Self {
            variant,
            steps: 2000,
            batch_size: 32,
            lambda: 50.0,
            seed: 0,
            window: 100,
            exit_eval_every: 0,
            section_eval_every: 10,
            store: None,
            metrics: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
            model: ModelDims::default(),
            optim: OptimConfig::default(),
            mask: MaskConfig::default(),
            gen: GeneratorConfig::top_only(4),
            disc: DiscriminatorConfig::default(),
            ctrl: ControllerConfig::default(),
            embgen: ReplacementConfig::default(),
        };
        match variant {
            Variant::Baseline | Variant::Embgen => {}
            Variant::EmbgenPretrained => cfg.embgen.embedding_source = EmbeddingSource::Frozen,
            Variant::EarlyExitDisc => {
                cfg.disc.early_exit = true;
                cfg.disc.share_params_with_gen = true;
            }
            Variant::AdaptiveGen => {
                cfg.gen = GeneratorConfig::default();
                cfg.exit_eval_every = 1;
            }
        }
        cfg
    }

    /// Reads a config file; `train.variant` picks the preset before the
    /// remaining keys are applied.
    pub fn from_file(path: &Path, variant_override: Option<Variant>) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_text(&text, variant_override)
    }

    pub fn from_text(text: &str, variant_override: Option<Variant>) -> Result<Self, TrainError> {
        let pairs = parse_pairs(text)?;
        let variant = match variant_override {
            Some(v) => v,
            None => match pairs.iter().rev().find(|(k, _)| k == "train.variant") {
                Some((_, v)) => v.parse()?,
                None => Variant::Baseline,
            },
        };
        let mut cfg = Self::for_variant(variant);
        for (k, v) in &pairs {
            if k != "train.variant" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let v = value.trim();
        match key {
            "train.variant" => {
                let variant: Variant = v.parse()?;
                if variant != self.variant {
                    return Err(TrainError::Config("train.variant must be set before other keys".into()));
                }
            }
            "train.steps" => self.steps = num(key, v)?,
            "train.batch_size" => self.batch_size = num(key, v)?,
            "train.lambda" => self.lambda = num(key, v)?,
            "train.seed" => self.seed = num(key, v)?,
            "train.window" | "ctrl.window" => self.window = num(key, v)?,
            "train.exit_eval_every" => self.exit_eval_every = num(key, v)?,
            "disc.eval_every" => self.section_eval_every = num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "data.store" => self.store = Some(PathBuf::from(v)),
            "train.metrics" => self.metrics = Some(PathBuf::from(v)),
            "train.checkpoint_dir" => self.checkpoint_dir = Some(PathBuf::from(v)),
            "model.hidden" => self.model.hidden = num(key, v)?,
            "model.heads" => self.model.heads = num(key, v)?,
            "model.ffn" => self.model.ffn = num(key, v)?,
            "optim.lr" => self.optim.lr = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.warmup_fraction" => self.optim.warmup_fraction = num(key, v)?,
            "optim.clip_norm" => self.optim.clip_norm = num(key, v)?,
            "mask_fraction" | "mask.fraction" => self.mask.mask_fraction = num(key, v)?,
            "mask_ratios" | "mask.ratios" => {
                self.mask.ratios = match v {
                    "electra" => MaskRatios::ELECTRA,
                    "bert" => MaskRatios::BERT,
                    _ => {
                        let r: Vec<f64> = list(key, v)?;
                        if r.len() != 3 {
                            return Err(TrainError::Config(format!("{key} needs mask,random,original")));
                        }
                        MaskRatios {
                            mask: r[0],
                            random: r[1],
                            original: r[2],
                        }
                    }
                }
            }
            "gen.n_layers" => self.gen.n_layers = num(key, v)?,
            "gen.exit_layers" => self.gen.exit_layers = list(key, v)?,
            "gen.exit_loss_weights" => self.gen.exit_loss_weights = list(key, v)?,
            "gen.skip_above_exit" => self.gen.skip_above_exit = flag(key, v)?,
            "gen.concat_exit_heads" => self.gen.concat_exit_heads = flag(key, v)?,
            "disc.n_layers" => self.disc.n_layers = num(key, v)?,
            "disc.n_sections" => self.disc.n_sections = num(key, v)?,
            "disc.early_exit" => self.disc.early_exit = flag(key, v)?,
            "disc.share_params_with_gen" => self.disc.share_params_with_gen = flag(key, v)?,
            "ctrl.alpha" => self.ctrl.alpha = num(key, v)?,
            "ctrl.initial_p" => self.ctrl.initial_p = list(key, v)?,
            "ctrl.reassignment_scores" => self.ctrl.reassignment_scores = list(key, v)?,
            "embgen.mode" => {
                self.embgen.mode = match v {
                    "topk" => ReplacementMode::TopK,
                    "noise" => ReplacementMode::Noise,
                    _ => return Err(TrainError::Config(format!("{key}: expected topk or noise, got {v:?}"))),
                }
            }
            "embgen.k" => self.embgen.k = num(key, v)?,
            "embgen.sigma" => self.embgen.noise_sigma = num(key, v)?,
            "embgen.aux_coeff" => self.embgen.aux_loss_coeff = num(key, v)?,
            "embgen.frozen_embeddings_path" => self.embgen.frozen_embeddings_path = Some(PathBuf::from(v)),
            _ => return Err(TrainError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Structural checks that do not need the data store.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.window == 0 || self.steps <= self.window {
            return bad(format!("steps ({}) must exceed the window ({})", self.steps, self.window));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.model.heads == 0 || self.model.hidden % self.model.heads != 0 {
            return bad(format!("hidden {} is not divisible by {} heads", self.model.hidden, self.model.heads));
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.warmup_fraction) {
            return bad("optimizer settings out of range".into());
        }
        self.mask.ratios.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.gen.validate()?;
        self.disc.validate()?;
        if self.disc.share_params_with_gen && self.disc.n_layers != self.gen.n_layers {
            return bad("shared trunks need disc.n_layers == gen.n_layers".into());
        }
        if self.ctrl.initial_p.len() != self.gen.exit_layers.len() && self.variant == Variant::AdaptiveGen {
            return bad(format!(
                "ctrl.initial_p has {} entries for {} exits",
                self.ctrl.initial_p.len(),
                self.gen.exit_layers.len()
            ));
        }
        if self.variant == Variant::EmbgenPretrained && self.embgen.frozen_embeddings_path.is_none() {
            return bad("embgen-pretrained needs embgen.frozen_embeddings_path".into());
        }
        Ok(())
    }
}

/// Every recognised key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("train.variant", "baseline | embgen | embgen-pretrained | early-exit-disc | adaptive-gen"),
    ("train.steps", "optimizer steps (default 2000)"),
    ("train.batch_size", "sequences per step (default 32)"),
    ("train.lambda", "discriminator loss weight (default 50)"),
    ("train.seed", "master seed (default 0)"),
    ("train.window", "metrics / controller window in steps (default 100; alias ctrl.window)"),
    ("train.exit_eval_every", "score every generator exit each n steps, 0 = off"),
    ("train.metrics", "JSON-lines metrics output path"),
    ("train.checkpoint_dir", "directory for checkpoints"),
    ("train.checkpoint_every", "checkpoint period in steps, 0 = only at the end"),
    ("data.store", "record store prefix or .records path"),
    ("model.hidden", "hidden width (default 64)"),
    ("model.heads", "attention heads (default 4)"),
    ("model.ffn", "feed-forward width (default 256)"),
    ("optim.lr", "peak learning rate (default 5e-4)"),
    ("optim.beta1", "Adam beta1 (default 0.9)"),
    ("optim.beta2", "Adam beta2 (default 0.999)"),
    ("optim.eps", "Adam epsilon (default 1e-6)"),
    ("optim.weight_decay", "decoupled weight decay (default 0.01)"),
    ("optim.warmup_fraction", "linear warmup share of steps (default 0.1)"),
    ("optim.clip_norm", "global gradient-norm clip (default 1.0)"),
    ("mask_fraction", "share of content tokens selected (default 0.15)"),
    ("mask_ratios", "mask,random,original or electra | bert (default electra)"),
    ("gen.n_layers", "generator trunk depth (default 4)"),
    ("gen.exit_layers", "1-based exit layers, e.g. 1,2,3,4"),
    ("gen.exit_loss_weights", "one MLM loss weight per exit"),
    ("gen.skip_above_exit", "stop the trunk at the sampled exit (throughput mode)"),
    ("gen.concat_exit_heads", "exit head j reads exits 1..j concatenated"),
    ("disc.n_layers", "discriminator trunk depth (default 4)"),
    ("disc.n_sections", "early-exit sections (default 4)"),
    ("disc.early_exit", "train only up to the active section"),
    ("disc.share_params_with_gen", "discriminator reuses the generator trunk"),
    ("disc.eval_every", "evaluate sections above the active one each n steps (default 10)"),
    ("ctrl.alpha", "controller step size (default 0.1)"),
    ("ctrl.initial_p", "initial exit distribution (default 0.1,0.2,0.3,0.4)"),
    ("ctrl.reassignment_scores", "reassignment scores (default 0,1,2,3)"),
    ("embgen.mode", "topk | noise"),
    ("embgen.k", "neighbours to draw from (default 10)"),
    ("embgen.sigma", "noise standard deviation (default 1.0)"),
    ("embgen.aux_coeff", "embedding-distance loss weight (default 1.0)"),
    ("embgen.frozen_embeddings_path", "checkpoint supplying frozen embeddings"),
];

/// `key = value` lines; `#` starts a comment; blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<N: FromStr>(key: &str, v: &str) -> Result<N, TrainError> {
    v.parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool, TrainError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(TrainError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list<N: FromStr>(key: &str, v: &str) -> Result<Vec<N>, TrainError> {
    let inner = v.trim_start_matches(['[', '{']).trim_end_matches([']', '}']);
    inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_wire_variants() {
        let a = TrainConfig::for_variant(Variant::AdaptiveGen);
        assert_eq!(a.gen.exit_layers, vec![1, 2, 3, 4]);
        let e = TrainConfig::for_variant(Variant::EarlyExitDisc);
        assert!(e.disc.early_exit && e.disc.share_params_with_gen);
        assert_eq!(TrainConfig::for_variant(Variant::Baseline).gen.exit_layers, vec![4]);
    }

    #[test]
    fn text_overrides_preset() {
        let text = "
            # comment
            train.variant = adaptive-gen
            train.steps = 300   # trailing
            gen.exit_loss_weights = [1, 1, 1, 1]
            mask_ratios = bert
            gen.skip_above_exit = true
        ";
        let c = TrainConfig::from_text(text, None).unwrap();
        assert_eq!(c.variant, Variant::AdaptiveGen);
        assert_eq!(c.steps, 300);
        assert_eq!(c.gen.exit_loss_weights, vec![1.0; 4]);
        assert_eq!(c.mask.ratios, MaskRatios::BERT);
        assert!(c.gen.skip_above_exit);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_values_fail() {
        assert!(TrainConfig::from_text("nope.key = 1", None).is_err());
        assert!(TrainConfig::from_text("train.variant = fast", None).is_err());
        assert!(TrainConfig::from_text("train.steps = many", None).is_err());
        assert!(TrainConfig::from_text("no equals sign", None).is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        for (k, _) in CONFIG_KEYS {
            let v = match *k {
                "train.variant" => "baseline",
                "mask_ratios" => "0.8,0.1,0.1",
                "embgen.mode" => "noise",
                "gen.skip_above_exit" | "gen.concat_exit_heads" | "disc.early_exit" | "disc.share_params_with_gen" => "false",
                "gen.exit_layers" => "4",
                "gen.exit_loss_weights" | "ctrl.initial_p" | "ctrl.reassignment_scores" => "1",
                "data.store" | "train.metrics" | "train.checkpoint_dir" | "embgen.frozen_embeddings_path" => "x",
                _ => "1",
            };
            TrainConfig::for_variant(Variant::Baseline).set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn validation_catches_bad_settings() {
        let mut c = TrainConfig::for_variant(Variant::Baseline);
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::for_variant(Variant::Baseline);
        c.steps = 100;
        assert!(c.validate().is_err());
        assert!(TrainConfig::for_variant(Variant::EmbgenPretrained).validate().is_err());
    }
}
