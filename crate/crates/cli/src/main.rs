use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use rtd_core::data::{build_store, RecordStore, StorePaths};
use rtd_core::trainer::{
    bench_config, measure_throughput, MetricsWindow, ThroughputRow, ThroughputTable, TrainConfig, Trainer, Variant,
    CONFIG_KEYS,
};

/// Failure split by exit status: bad invocation or input files (1) versus
/// errors while doing the work (2).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Runtime(e.into())
}

#[derive(Parser)]
#[command(name = "rtd-lab", version, about = "Replaced-token-detection pre-training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize a text corpus into a vocabulary and a record store.
    BuildData {
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8192)]
        vocab_size: usize,
        #[arg(long, default_value_t = 128)]
        seq_len: usize,
        /// File stem for `<name>.vocab` and `<name>.records`.
        #[arg(long, default_value = "corpus")]
        name: String,
    },
    /// Train one variant.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        /// Flat `section.key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Record store prefix or `.records` file (overrides data.store).
        #[arg(long)]
        store: Option<PathBuf>,
        /// JSON-lines metrics output (overrides train.metrics).
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Compare steps/sec across variants on one setup.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.to_vec())]
        variants: Vec<Variant>,
        /// Steps per variant, split into 8 windows (the first 2 are warmup).
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Turn metrics logs into CSV series for plotting.
    ExportPlots {
        /// One or more JSON-lines metrics files.
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

const BENCH_WARMUP: usize = 2;
const BENCH_WINDOWS: usize = 6;

fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (file lines `key = value`, or --set key=value):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s
}

fn command() -> clap::Command {
    let keys = keys_help();
    let mut cmd = Cli::command().after_help(keys.clone());
    for name in ["train", "bench"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(keys.clone()));
    }
    cmd
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();

    let cli = match command().try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Outcome {
    match cmd {
        Command::BuildData {
            corpus,
            out,
            vocab_size,
            seq_len,
            name,
        } => {
            require_file(&corpus, "corpus")?;
            let store = build_store(&corpus, &out, &name, vocab_size, seq_len).map_err(runtime)?;
            let paths = StorePaths::new(&out, &name);
            log::info!(
                "wrote {} records (vocab {}) to {}",
                store.len(),
                store.vocab_size(),
                paths.records.display()
            );
            Ok(())
        }
        Command::Train {
            variant,
            config,
            seed,
            steps,
            store,
            metrics,
            checkpoint_dir,
            resume,
            overrides,
        } => {
            let mut cfg = load_config(config.as_deref(), variant, &overrides)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.steps = n;
            }
            if store.is_some() {
                cfg.store = store;
            }
            if metrics.is_some() {
                cfg.metrics = metrics;
            }
            if checkpoint_dir.is_some() {
                cfg.checkpoint_dir = checkpoint_dir;
            }
            cfg.validate().map_err(usage)?;
            let data = open_store(cfg.store.as_deref())?;
            if let Some(p) = &resume {
                require_file(p, "checkpoint")?;
            }
            train(cfg, &data, resume.as_deref()).map_err(runtime)
        }
        Command::Bench {
            variants,
            steps,
            config,
            seed,
            store,
            out,
            overrides,
        } => {
            let mut base = load_config(config.as_deref(), None, &overrides)?;
            if let Some(s) = seed {
                base.seed = s;
            }
            if store.is_some() {
                base.store = store;
            }
            let windows = BENCH_WARMUP + BENCH_WINDOWS;
            if steps < windows {
                return Err(usage(anyhow!("--steps must be at least {windows}")));
            }
            base.window = steps / windows;
            let data = open_store(base.store.as_deref())?;
            let configs: Vec<TrainConfig> = variants.iter().map(|v| bench_config(&base, *v)).collect();
            for c in &configs {
                let mut c = c.clone();
                c.steps = base.window * windows;
                c.validate().map_err(usage)?;
            }
            let table = measure_throughput(&configs, &data, BENCH_WARMUP, BENCH_WINDOWS);
            for n in &table.notices {
                log::warn!("{n}");
            }
            let csv = table.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                write_file(&path, &csv)?;
            }
            if table.rows.is_empty() {
                return Err(runtime(anyhow!("no variant completed")));
            }
            Ok(())
        }
        Command::ExportPlots { metrics, out } => {
            let mut runs = Vec::new();
            for path in &metrics {
                require_file(path, "metrics file")?;
                runs.push(read_metrics(path)?);
            }
            export_plots(&runs, &out).map_err(runtime)
        }
    }
}

fn require_file(path: &Path, what: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} not found: {}", path.display())))
    }
}

fn load_config(path: Option<&Path>, variant: Option<Variant>, overrides: &[String]) -> Outcome<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p, "config file")?;
            TrainConfig::from_file(p, variant)
                .map_err(|e| usage(anyhow!(e).context(format!("reading {}", p.display()))))?
        }
        None => TrainConfig::for_variant(variant.unwrap_or(Variant::Baseline)),
    };
    for item in overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects key=value, got {item:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    Ok(cfg)
}

fn open_store(path: Option<&Path>) -> Outcome<RecordStore> {
    let path = path.ok_or_else(|| usage(anyhow!("no record store given (use --store or data.store)")))?;
    let records = StorePaths::from_prefix(path).records;
    require_file(&records, "record store")?;
    RecordStore::open(&records).map_err(|e| usage(anyhow!(e).context(format!("opening {}", records.display()))))
}

fn train(cfg: TrainConfig, data: &RecordStore, resume: Option<&Path>) -> anyhow::Result<()> {
    log::info!(
        "training {} for {} steps on {} records (seed {})",
        cfg.variant,
        cfg.steps,
        data.len(),
        cfg.seed
    );
    let mut t = match resume {
        Some(p) => Trainer::resume(cfg, data, p).with_context(|| format!("resuming from {}", p.display()))?,
        None => Trainer::new(cfg, data)?,
    };
    t.run()?;
    if let Some(last) = t.history().last() {
        log::info!(
            "done at step {}: loss {:.4}, rtd acc {:.4}, {:.1} steps/s",
            last.step,
            last.loss_total,
            last.rtd_acc,
            last.steps_per_sec
        );
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
    }
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn read_metrics(path: &Path) -> Outcome<Vec<MetricsWindow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(usage)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| usage(anyhow!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
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

/// Writes `rtd_acc_per_exit.csv`, `p_vector.csv` and `steps_per_sec.csv`
/// (plus `rtd_acc_per_section.csv` when any run has sections). Each run
/// contributes one row per window to the series files.
fn export_plots(runs: &[Vec<MetricsWindow>], out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let width = |f: fn(&MetricsWindow) -> usize| runs.iter().flatten().map(f).max().unwrap_or(0);

    let series = |file: &str, prefix: &str, n: usize, values: &dyn Fn(&MetricsWindow) -> Vec<Option<f64>>| {
        let path = out.join(file);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut header = vec!["variant".to_string(), "step".to_string()];
        header.extend((1..=n).map(|j| format!("{prefix}{j}")));
        w.write_record(&header)?;
        for m in runs.iter().flatten() {
            let mut row = vec![m.variant.clone(), m.step.to_string()];
            let v = values(m);
            row.extend((0..n).map(|j| cell(v.get(j).copied().flatten())));
            w.write_record(&row)?;
        }
        w.flush()?;
        log::info!("wrote {}", path.display());
        anyhow::Ok(())
    };

    let exits = width(|m| m.rtd_acc_per_exit.len());
    series("rtd_acc_per_exit.csv", "exit", exits, &|m| m.rtd_acc_per_exit.clone())?;
    let p = width(|m| m.p_vector.len());
    series("p_vector.csv", "p", p, &|m| m.p_vector.iter().map(|x| Some(*x)).collect())?;
    let sections = width(|m| m.rtd_acc_per_section.len());
    if sections > 0 {
        series("rtd_acc_per_section.csv", "section", sections, &|m| m.rtd_acc_per_section.clone())?;
    }

    // one row per variant: median window speed, relative to the baseline
    let mut speeds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for m in runs.iter().flatten() {
        if !speeds.contains_key(&m.variant) {
            order.push(m.variant.clone());
        }
        speeds.entry(m.variant.clone()).or_default().push(m.steps_per_sec);
    }
    let mut table = ThroughputTable {
        rows: order
            .iter()
            .map(|v| ThroughputRow {
                variant: v.clone(),
                steps_per_sec: median(&speeds[v]),
                ratio: 1.0,
                windows: speeds[v].clone(),
            })
            .collect(),
        notices: Vec::new(),
    };
    let base = table
        .row(Variant::Baseline.name())
        .or(table.rows.first())
        .map(|r| r.steps_per_sec);
    if let Some(b) = base {
        for r in &mut table.rows {
            r.ratio = r.steps_per_sec / b;
        }
    }
    let path = out.join("steps_per_sec.csv");
    std::fs::write(&path, table.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
