//! Metrics, the bridging × TWS ablation grid, and result reports.

use std::cmp::Ordering;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::info;

use crate::data::{make_samples, split, SampleSet, SplitPlan, Splits, StandardScaler, TimeSeriesDataset, WindowSpec};
use crate::error::{Error, Result};
use crate::model::{Bridging, Forecaster, RunConfig};
use crate::tensor::DenseArray;
use crate::train::train;
use crate::tws::TwsWhitener;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Horizon {
    Steps(usize),
    /// Mean over the horizons of one dataset and cell.
    Average,
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Steps(n) => write!(f, "{n}"),
            Horizon::Average => f.write_str("avg"),
        }
    }
}

impl FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Horizon::Average),
            n => n
                .parse()
                .map(Horizon::Steps)
                .map_err(|e| Error::Format(format!("horizon {n:?}: {e}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub dataset: String,
    pub horizon: Horizon,
    pub bridging: Bridging,
    pub tws: bool,
    pub mse: f64,
    pub mae: f64,
    pub samples: usize,
    /// Training plus evaluation time. Kept out of the results file so that
    /// reruns produce identical bytes.
    pub wall_seconds: Option<f64>,
}

impl EvalResult {
    fn key(&self) -> (&str, Horizon, Bridging, bool) {
        (&self.dataset, self.horizon, self.bridging, self.tws)
    }
}

/// Per-window `(mse, mae)` over every channel and horizon step.
pub fn window_metrics(pred: &DenseArray, target: &DenseArray) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(target.data()) {
        se += (p - t).powi(2);
        ae += (p - t).abs();
    }
    Ok((se / n, ae / n))
}

/// Mean per-window MSE and MAE of `model` over `samples`, with the window
/// count.
pub fn score(
    model: &Forecaster,
    samples: &SampleSet,
    whitener: Option<&TwsWhitener>,
) -> Result<(f64, f64, usize)> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no windows to evaluate".into()));
    }
    let (mut mse, mut mae) = (0.0, 0.0);
    let batch = model.config.batch_size.max(1);
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch) {
        let windows: Vec<_> = chunk.iter().map(|&i| samples.get(i)).collect();
        let preds = model.predict_batch(&windows, whitener)?;
        for (pred, w) in preds.iter().zip(&windows) {
            let (a, b) = window_metrics(pred, &w.target)?;
            mse += a;
            mae += b;
        }
    }
    let n = samples.len() as f64;
    Ok((mse / n, mae / n, samples.len()))
}

pub fn evaluate(
    model: &Forecaster,
    samples: &SampleSet,
    whitener: Option<&TwsWhitener>,
    dataset: &str,
) -> Result<EvalResult> {
    let (mse, mae, count) = score(model, samples, whitener)?;
    Ok(EvalResult {
        dataset: dataset.to_string(),
        horizon: Horizon::Steps(model.config.horizon),
        bridging: model.config.bridging,
        tws: model.config.tws_enabled,
        mse,
        mae,
        samples: count,
        wall_seconds: None,
    })
}

/// A dataset standardised with its training statistics, split, and with the
/// whitener fitted once on the standardised training segment.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub name: String,
    pub values: Arc<DenseArray>,
    pub splits: Splits,
    pub scaler: StandardScaler,
    pub whitener: TwsWhitener,
}

impl PreparedDataset {
    pub fn new(ds: &TimeSeriesDataset, lookback: usize, threshold: f64) -> Result<Self> {
        let plan = SplitPlan::for_dataset(&ds.name, ds.len());
        let splits = split(ds.len(), plan, lookback)?;
        let scaler = StandardScaler::fit(&ds.values, splits.train_end())?;
        let values = scaler.transform(&ds.values);
        let whitener = TwsWhitener::fit(&values.columns(0, splits.train_end())?, threshold)?;
        Ok(Self {
            name: ds.name.clone(),
            values: Arc::new(values),
            splits,
            scaler,
            whitener,
        })
    }

    pub fn samples(&self, config: &RunConfig) -> Result<(SampleSet, SampleSet, SampleSet)> {
        let spec = WindowSpec {
            exo_lookback: config.exo_lookback,
            ..WindowSpec::new(config.lookback, config.horizon)
        };
        let make = |view| make_samples(self.values.clone(), view, spec);
        Ok((
            make(self.splits.train)?,
            make(self.splits.val)?,
            make(self.splits.test)?,
        ))
    }

    pub fn whitener_for(&self, config: &RunConfig) -> Option<&TwsWhitener> {
        config.tws_enabled.then_some(&self.whitener)
    }
}

/// Trains one configuration from scratch and scores it on the test split.
pub fn run_cell(data: &PreparedDataset, config: &RunConfig) -> Result<EvalResult> {
    let started = Instant::now();
    let (tr, va, te) = data.samples(config)?;
    let whitener = data.whitener_for(config);
    let model = Forecaster::new(config.clone())?;
    let (best, report) = train(model, &tr, &va, whitener)?;
    info!(
        "{} H={} {} tws={}: best epoch {} of {}",
        data.name,
        config.horizon,
        config.bridging,
        config.tws_enabled,
        report.best_epoch,
        report.epochs.len()
    );
    let mut result = evaluate(&best, &te, whitener, &data.name)?;
    result.wall_seconds = Some(started.elapsed().as_secs_f64());
    Ok(result)
}

/// The four ablation cells in table order.
pub const CELLS: [(Bridging, bool); 4] = [
    (Bridging::Concat, false),
    (Bridging::Concat, true),
    (Bridging::Cross, false),
    (Bridging::Cross, true),
];

/// Configurations for every (horizon, cell) pair. Cell `i` in this order runs
/// with seed `base.seed + i`.
pub fn ablation_configs(base: &RunConfig, horizons: &[usize]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for &h in horizons {
        for &(bridging, tws) in &CELLS {
            out.push(RunConfig {
                horizon: h,
                bridging,
                tws_enabled: tws,
                seed: base.seed + out.len() as u64,
                ..base.clone()
            });
        }
    }
    out
}

/// Runs the whole grid, up to `threads` cells at a time, and appends the
/// four horizon-average rows.
pub fn run_ablation(
    data: &PreparedDataset,
    base: &RunConfig,
    horizons: &[usize],
    threads: usize,
) -> Result<Vec<EvalResult>> {
    if horizons.is_empty() {
        return Err(Error::Config("no horizons to ablate".into()));
    }
    let configs = ablation_configs(base, horizons);
    let mut results: Vec<Option<Result<EvalResult>>> = configs.iter().map(|_| None).collect();
    for (chunk, slots) in configs
        .chunks(threads.max(1))
        .zip(results.chunks_mut(threads.max(1)))
    {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|cfg| s.spawn(move || run_cell(data, cfg)))
                .collect();
            for (slot, h) in slots.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| {
                    Err(Error::Contract("ablation worker panicked".into()))
                }));
            }
        });
    }
    let mut rows = results
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    rows.extend(horizon_averages(&rows));
    Ok(rows)
}

/// One average row per (dataset, bridging, tws) over its per-horizon rows.
pub fn horizon_averages(rows: &[EvalResult]) -> Vec<EvalResult> {
    let mut groups: Vec<EvalResult> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for r in rows.iter().filter(|r| r.horizon != Horizon::Average) {
        let found = groups
            .iter()
            .position(|g| g.dataset == r.dataset && g.bridging == r.bridging && g.tws == r.tws);
        match found {
            Some(i) => {
                let g = &mut groups[i];
                g.mse += r.mse;
                g.mae += r.mae;
                g.samples += r.samples;
                g.wall_seconds = match (g.wall_seconds, r.wall_seconds) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
                counts[i] += 1.0;
            }
            None => {
                groups.push(EvalResult {
                    horizon: Horizon::Average,
                    ..r.clone()
                });
                counts.push(1.0);
            }
        }
    }
    for (g, n) in groups.iter_mut().zip(counts) {
        g.mse /= n;
        g.mae /= n;
    }
    groups
}

pub fn sort_results(results: &mut [EvalResult]) {
    results.sort_by(|a, b| a.key().partial_cmp(&b.key()).unwrap_or(Ordering::Equal));
}

const TSV_HEADER: &str = "dataset\thorizon\tbridging\ttws\tmse\tmae\tsamples";

/// One result per line, sorted, with floats written to round-trip exactly.
pub fn results_tsv(results: &[EvalResult]) -> String {
    let mut sorted = results.to_vec();
    sort_results(&mut sorted);
    let mut out = format!("{TSV_HEADER}\n");
    for r in &sorted {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:?}\t{:?}\t{}",
            r.dataset,
            r.horizon,
            r.bridging,
            if r.tws { "on" } else { "off" },
            r.mse,
            r.mae,
            r.samples
        );
    }
    out
}

pub fn parse_results_tsv(text: &str) -> Result<Vec<EvalResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(TSV_HEADER) {
        return Err(Error::Format("results file: missing header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: String| Error::Format(format!("results line {}: {m}", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("{} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            Ok(EvalResult {
                dataset: f[0].to_string(),
                horizon: f[1].parse()?,
                bridging: f[2].parse()?,
                tws: match f[3] {
                    "on" => true,
                    "off" => false,
                    other => return Err(bad(format!("tws flag {other:?}"))),
                },
                mse: num(f[4])?,
                mae: num(f[5])?,
                samples: f[6].parse().map_err(|e| bad(format!("{e}")))?,
                wall_seconds: None,
            })
        })
        .collect()
}

/// Wall-clock seconds per cell, for the timing side file.
pub fn timings_tsv(results: &[EvalResult]) -> String {
    let mut sorted = results.to_vec();
    sort_results(&mut sorted);
    let mut out = String::from("dataset\thorizon\tbridging\ttws\twall_seconds\n");
    for r in &sorted {
        let secs = r.wall_seconds.map_or("-".to_string(), |s| format!("{s:.3}"));
        let tws = if r.tws { "on" } else { "off" };
        let _ = writeln!(out, "{}\t{}\t{}\t{tws}\t{secs}", r.dataset, r.horizon, r.bridging);
    }
    out
}

/// Aligned text table: one row per (dataset, horizon), MSE and MAE for each
/// bridging/TWS cell.
pub fn results_table(results: &[EvalResult]) -> String {
    let mut sorted = results.to_vec();
    sort_results(&mut sorted);
    let mut rows: Vec<(String, Horizon)> = sorted
        .iter()
        .map(|r| (r.dataset.clone(), r.horizon))
        .collect();
    rows.dedup();

    let cell_name = |b: Bridging, t: bool| format!("{b} {}", if t { "w/ TWS" } else { "w/o TWS" });
    let mut out = format!("{:<16} {:>8}", "dataset", "horizon");
    for (b, t) in CELLS {
        let _ = write!(out, " | {:^19}", cell_name(b, t));
    }
    out.push('\n');
    let _ = write!(out, "{:<16} {:>8}", "", "");
    for _ in CELLS {
        let _ = write!(out, " | {:>9} {:>9}", "MSE", "MAE");
    }
    out.push('\n');
    for (ds, h) in rows {
        let _ = write!(out, "{ds:<16} {:>8}", h.to_string());
        for (b, t) in CELLS {
            let hit = sorted
                .iter()
                .find(|r| r.dataset == ds && r.horizon == h && r.bridging == b && r.tws == t);
            match hit {
                Some(r) => {
                    let _ = write!(out, " | {:>9.4} {:>9.4}", r.mse, r.mae);
                }
                None => {
                    let _ = write!(out, " | {:>9} {:>9}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(ds: &str, h: Horizon, b: Bridging, tws: bool, mse: f64) -> EvalResult {
        EvalResult {
            dataset: ds.into(),
            horizon: h,
            bridging: b,
            tws,
            mse,
            mae: mse.sqrt() / 2.0,
            samples: 10,
            wall_seconds: None,
        }
    }

    #[test]
    fn constant_residual_metrics() {
        let t = DenseArray::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(window_metrics(&t, &t).unwrap(), (0.0, 0.0));
        let p = t.map(|v| v - 0.5);
        assert_eq!(window_metrics(&p, &t).unwrap(), (0.25, 0.5));
    }

    #[test]
    fn grid_has_four_cells_per_horizon_plus_averages() {
        let base = RunConfig::default();
        let configs = ablation_configs(&base, &[96, 192, 336, 720]);
        assert_eq!(configs.len(), 16);
        let rows: Vec<_> = configs
            .iter()
            .map(|c| result("d", Horizon::Steps(c.horizon), c.bridging, c.tws_enabled, 1.0))
            .collect();
        assert_eq!(rows.len() + horizon_averages(&rows).len(), 4 * 4 + 4);
        for (i, c) in configs.iter().enumerate() {
            assert_eq!(c.seed, base.seed + i as u64);
            let d = c.diff(&configs[0]);
            assert!(d.iter().all(|k| ["horizon", "bridging", "tws_enabled", "seed"].contains(k)));
        }
    }

    #[test]
    fn tsv_is_sorted_and_round_trips() {
        let rows = vec![
            result("b", Horizon::Steps(96), Bridging::Cross, true, 0.1 + 0.2),
            result("a", Horizon::Average, Bridging::Cross, false, 0.4),
            result("a", Horizon::Steps(192), Bridging::Concat, true, 0.5),
            result("a", Horizon::Steps(96), Bridging::Cross, false, 1.0 / 3.0),
        ];
        let text = results_tsv(&rows);
        let back = parse_results_tsv(&text).unwrap();
        let mut sorted = rows.clone();
        sort_results(&mut sorted);
        assert_eq!(back, sorted);
        assert_eq!(back[0].horizon, Horizon::Steps(96));
        assert_eq!(back[2].horizon, Horizon::Average);
        assert_eq!(text, results_tsv(&back));
    }

    #[test]
    fn single_result_table() {
        let table = results_table(&[result("x", Horizon::Steps(96), Bridging::Cross, true, 0.2)]);
        assert_eq!(table.lines().count(), 3);
    }
}
