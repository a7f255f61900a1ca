//! Steps-per-second comparison across variants on one fixed setup.

use serde::{Deserialize, Serialize};

use crate::data::RecordStore;

use super::{TrainConfig, Trainer, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub variant: String,
    /// Median over the measured windows.
    pub steps_per_sec: f64,
    /// Relative to the baseline row (or the first row without one).
    pub ratio: f64,
    pub windows: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputTable {
    pub rows: Vec<ThroughputRow>,
    /// Variants that failed to run.
    pub notices: Vec<String>,
}

impl ThroughputTable {
    pub fn row(&self, variant: &str) -> Option<&ThroughputRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// `variant,steps/sec,ratio` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,steps/sec,ratio\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.3},{:.3}\n", r.variant, r.steps_per_sec, r.ratio));
        }
        s
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Copy of `base` rewired for `variant`, keeping sizes, seed and schedule.
/// The adaptive generator runs in skip mode.
pub fn bench_config(base: &TrainConfig, variant: Variant) -> TrainConfig {
    let preset = TrainConfig::for_variant(variant);
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.gen = preset.gen;
    cfg.disc.early_exit = preset.disc.early_exit;
    cfg.disc.share_params_with_gen = preset.disc.share_params_with_gen;
    cfg.embgen.embedding_source = preset.embgen.embedding_source;
    cfg.exit_eval_every = 0;
    cfg.metrics = None;
    cfg.checkpoint_dir = None;
    if variant == Variant::AdaptiveGen {
        cfg.gen.skip_above_exit = true;
    }
    cfg
}

/// Trains each config for `warmup + windows` windows and reports the
/// median steps/sec of the post-warmup windows. Failing variants are left
/// out with a notice.
pub fn measure_throughput(configs: &[TrainConfig], data: &RecordStore, warmup: usize, windows: usize) -> ThroughputTable {
    let mut table = ThroughputTable::default();
    for cfg in configs {
        let mut cfg = cfg.clone();
        cfg.steps = (warmup + windows) * cfg.window;
        cfg.metrics = None;
        cfg.checkpoint_dir = None;
        cfg.exit_eval_every = 0;
        let name = cfg.variant.name().to_string();
        let result = Trainer::new(cfg, data).and_then(|mut t| {
            t.run()?;
            Ok(t.history()[warmup..].iter().map(|w| w.steps_per_sec).collect::<Vec<_>>())
        });
        match result {
            Ok(w) if !w.is_empty() => table.rows.push(ThroughputRow {
                variant: name,
                steps_per_sec: median(&w),
                ratio: 1.0,
                windows: w,
            }),
            Ok(_) => table.notices.push(format!("{name}: no measured windows")),
            Err(e) => {
                log::warn!("{name} omitted from throughput table: {e}");
                table.notices.push(format!("{name}: {e}"));
            }
        }
    }
    let base = table
        .rows
        .iter()
        .find(|r| r.variant == Variant::Baseline.name())
        .or(table.rows.first())
        .map(|r| r.steps_per_sec);
    if let Some(b) = base {
        for r in &mut table.rows {
            r.ratio = r.steps_per_sec / b;
        }
    }
    table
}
