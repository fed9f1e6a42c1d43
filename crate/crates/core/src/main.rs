use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tws_core::data::{load_csv, synthetic, write_csv, TimeSeriesDataset};
use tws_core::eval::{
    evaluate, results_table, results_tsv, run_ablation, timings_tsv, PreparedDataset,
};
use tws_core::model::{Bridging, Forecaster, RunConfig, BENCHMARK_HORIZONS};
use tws_core::train::{train, Checkpoint};
use tws_core::tws::TwsWhitener;
use tws_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tws", version, about = "Exogenous window whitening and global-token forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the whitener on the (standardised) training split of a CSV.
    FitTws {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.90)]
        threshold: f64,
        #[arg(long, default_value_t = 96)]
        lookback: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a checkpoint plus its epoch log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        bridging: Option<Bridging>,
        #[arg(long)]
        tws: Option<Switch>,
        /// Whitener file from `fit-tws`; fitted on the fly when omitted.
        #[arg(long)]
        whitener: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Overrides the whitener path stored in the checkpoint.
        #[arg(long)]
        whitener: Option<PathBuf>,
    },
    /// Run the bridging × TWS grid over several horizons.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = BENCHMARK_HORIZONS)]
        horizons: Vec<usize>,
        #[command(flatten)]
        common: Common,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic dataset in the benchmark CSV layout.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::LowRank)]
        kind: SynthKind,
        #[arg(long, default_value_t = 2000)]
        len: usize,
        #[arg(long, default_value_t = 7)]
        channels: usize,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 0.0)]
        snr_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    LowRank,
    Sinusoids,
}

/// Run settings shared by `train` and `ablate`. Precedence: defaults, then
/// the config file, then these flags.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    exo_lookback: Option<usize>,
    #[arg(long)]
    patch_len: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_kv_text(&text)?;
        }
        let flags: [(&str, Option<String>); 14] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("lookback", self.lookback.map(|v| v.to_string())),
            ("exo_lookback", self.exo_lookback.map(|v| v.to_string())),
            ("patch_len", self.patch_len.map(|v| v.to_string())),
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("learning_rate", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("max_steps", self.max_steps.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }
}

impl std::str::FromStr for Switch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Switch as ValueEnum>::from_str(s, true)
    }
}

fn load_dataset(path: &Path) -> Result<TimeSeriesDataset> {
    let ds = load_csv(path)?;
    info!(
        "loaded {}: {} channels × {} rows ({})",
        ds.name,
        ds.channels(),
        ds.len(),
        ds.frequency
    );
    Ok(ds)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitTws {
            data,
            threshold,
            lookback,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let prepared = PreparedDataset::new(&ds, lookback, threshold)?;
            let w = &prepared.whitener;
            println!(
                "k = {} of {} features, captured variance {:.4}",
                w.k,
                w.features(),
                w.captured_variance_ratio()
            );
            w.save(&out)
        }
        Command::Train {
            data,
            horizon,
            bridging,
            tws,
            whitener,
            common,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(h) = horizon {
                cfg.horizon = h;
            }
            if let Some(b) = bridging {
                cfg.bridging = b;
            }
            if let Some(t) = tws {
                cfg.tws_enabled = matches!(t, Switch::On);
            }
            cfg.validate()?;
            let ds = load_dataset(&data)?;
            let mut prepared = PreparedDataset::new(&ds, cfg.lookback, cfg.threshold)?;
            if let Some(path) = &whitener {
                prepared.whitener = TwsWhitener::load(path)?;
            }
            let (tr, va, _) = prepared.samples(&cfg)?;
            let model = Forecaster::new(cfg.clone())?;
            let (best, report) = train(model, &tr, &va, prepared.whitener_for(&cfg))?;
            let mut ckpt = Checkpoint::new(best);
            if cfg.tws_enabled {
                let path = match whitener {
                    Some(p) => p,
                    None => {
                        let p = out.with_extension("whitener");
                        prepared.whitener.save(&p)?;
                        p
                    }
                };
                ckpt.whitener_path = Some(path.display().to_string());
            }
            ckpt.save(&out)?;
            write(&out.with_extension("log.tsv"), &report.to_tsv())?;
            println!(
                "best epoch {} (val MSE {:.6}), {} steps, {}",
                report.best_epoch,
                report.best_val_mse,
                report.steps,
                if report.stop_reason == tws_core::train::StopReason::Completed {
                    "completed"
                } else {
                    "early stopped"
                }
            );
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            whitener,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = &ckpt.model.config;
            let ds = load_dataset(&data)?;
            let mut prepared = PreparedDataset::new(&ds, cfg.lookback, cfg.threshold)?;
            let stored = ckpt.whitener_path.as_ref().map(PathBuf::from);
            if let Some(path) = whitener.or(stored) {
                prepared.whitener = TwsWhitener::load(&path)?;
            }
            let (tr, va, te) = prepared.samples(cfg)?;
            let set = match split {
                SplitName::Train => tr,
                SplitName::Val => va,
                SplitName::Test => te,
            };
            let result = evaluate(&ckpt.model, &set, prepared.whitener_for(cfg), &prepared.name)?;
            print!("{}", results_table(std::slice::from_ref(&result)));
            print!("{}", results_tsv(&[result]));
            Ok(())
        }
        Command::Ablate {
            data,
            horizons,
            common,
            threads,
            out,
        } => {
            let base = common.resolve()?;
            base.validate()?;
            let ds = load_dataset(&data)?;
            let prepared = PreparedDataset::new(&ds, base.lookback, base.threshold)?;
            let results = run_ablation(&prepared, &base, &horizons, threads)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let table = results_table(&results);
            write(&out.join("results.tsv"), &results_tsv(&results))?;
            write(&out.join("results.txt"), &table)?;
            write(&out.join("timings.tsv"), &timings_tsv(&results))?;
            write(&out.join("base_config.txt"), &base.to_kv_text())?;
            print!("{table}");
            Ok(())
        }
        Command::Synth {
            kind,
            len,
            channels,
            rank,
            snr_db,
            seed,
            out,
        } => {
            let ds = match kind {
                SynthKind::LowRank => synthetic::low_rank_noisy(len, channels, rank, snr_db, seed)?,
                SynthKind::Sinusoids => synthetic::sinusoids(len, channels, seed)?,
            };
            write_csv(&ds, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
