//! Dataset ingestion, chronological splits, sliding windows and per-window
//! instance normalisation.

pub mod synthetic;

use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::tensor::DenseArray;

/// Floor for instance-normalisation standard deviations.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub dates: Vec<String>,
    /// `[channels, time]`.
    pub values: DenseArray,
    /// Sampling interval inferred from the first two timestamps, e.g. `1h`.
    pub frequency: String,
}

impl TimeSeriesDataset {
    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a dataset with synthetic hourly timestamps.
    pub fn from_values(name: &str, feature_names: Vec<String>, values: DenseArray) -> Result<Self> {
        if values.ndim() != 2 || values.rows() != feature_names.len() {
            return Err(Error::Shape(format!(
                "{} feature names for values {:?}",
                feature_names.len(),
                values.shape()
            )));
        }
        let start = NaiveDateTime::parse_from_str("2016-07-01 00:00:00", DATE_FORMATS[0])
            .expect("valid literal");
        let dates = (0..values.cols() as i64)
            .map(|h| (start + chrono::Duration::hours(h)).format(DATE_FORMATS[0]).to_string())
            .collect();
        Ok(Self {
            name: name.to_string(),
            feature_names,
            dates,
            values,
            frequency: "1h".into(),
        })
    }
}

const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"];

fn infer_frequency(dates: &[String]) -> String {
    let parse = |s: &str| {
        DATE_FORMATS
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
    };
    let (Some(a), Some(b)) = (
        dates.first().and_then(|d| parse(d)),
        dates.get(1).and_then(|d| parse(d)),
    ) else {
        return "unknown".into();
    };
    let minutes = (b - a).num_minutes();
    match minutes {
        m if m <= 0 => "unknown".into(),
        m if m % 60 == 0 => format!("{}h", m / 60),
        m => format!("{m}min"),
    }
}

/// Loads a benchmark-style CSV: a header row whose first column is `date`,
/// followed by numeric feature columns.
pub fn load_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let shown = path.display().to_string();
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: shown.clone(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, 1, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, 1, e.to_string()))?
        .clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, 1, "empty file".into()));
    }
    if header[0].trim().trim_start_matches('\u{feff}') != "date" {
        return Err(parse_err(1, 1, format!("first column must be `date`, found {:?}", &header[0])));
    }
    let width = header.len();
    if width < 2 {
        return Err(parse_err(1, 2, "no feature columns".into()));
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let channels = width - 1;

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channels];
    let mut dates = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(line, 1, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(
                line,
                record.len().min(width) + 1,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        dates.push(record[0].to_string());
        for (c, cell) in record.iter().skip(1).enumerate() {
            let value: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(line, c + 2, format!("non-numeric cell {cell:?}")))?;
            if !value.is_finite() {
                return Err(parse_err(line, c + 2, format!("non-finite cell {cell:?}")));
            }
            columns[c].push(value);
        }
    }
    if dates.is_empty() {
        return Err(parse_err(2, 1, "no data rows".into()));
    }
    let values = DenseArray::new(vec![channels, dates.len()], columns.concat())?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(TimeSeriesDataset {
        name,
        feature_names,
        frequency: infer_frequency(&dates),
        dates,
        values,
    })
}

pub fn write_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let io = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["date".to_string()];
    header.extend(ds.feature_names.iter().cloned());
    writer.write_record(&header).map_err(io)?;
    for t in 0..ds.len() {
        let mut row = vec![ds.dates[t].clone()];
        row.extend((0..ds.channels()).map(|c| format!("{:?}", ds.values.at(c, t))));
        writer.write_record(&row).map_err(io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Raw row counts of the three chronological segments, before any lookback
/// context is prepended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitPlan {
    /// 12/4/4 months of hourly rows.
    pub fn ett_hourly() -> Self {
        Self {
            train: 12 * 30 * 24,
            val: 4 * 30 * 24,
            test: 4 * 30 * 24,
        }
    }

    /// 12/4/4 months of 15-minute rows.
    pub fn ett_minute() -> Self {
        let h = Self::ett_hourly();
        Self {
            train: h.train * 4,
            val: h.val * 4,
            test: h.test * 4,
        }
    }

    /// Fractional split with the remainder assigned to validation.
    pub fn ratio(total: usize, train_frac: f64, test_frac: f64) -> Self {
        let train = (total as f64 * train_frac) as usize;
        let test = (total as f64 * test_frac) as usize;
        Self {
            train,
            val: total.saturating_sub(train + test),
            test,
        }
    }

    /// Plan whose lookback-window counts are exactly the given numbers.
    pub fn from_window_counts(train_n: usize, val_n: usize, test_n: usize, lookback: usize) -> Self {
        Self {
            train: train_n + lookback - 1,
            val: val_n.saturating_sub(1),
            test: test_n.saturating_sub(1),
        }
    }

    /// The benchmark convention for a dataset name: month-based for ETT
    /// files, 70/10/20 otherwise.
    pub fn for_dataset(name: &str, total: usize) -> Self {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("etth") {
            Self::ett_hourly()
        } else if lower.starts_with("ettm") {
            Self::ett_minute()
        } else {
            Self::ratio(total, 0.7, 0.2)
        }
    }
}

/// Half-open row range `[start, end)`; validation and test views include
/// `lookback` rows of context from the preceding segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitView {
    pub start: usize,
    pub end: usize,
}

impl SplitView {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Number of length-`lookback` windows (the dataset-size convention).
    pub fn window_count(&self, lookback: usize) -> usize {
        (self.len() + 1).saturating_sub(lookback)
    }

    /// Number of supervised samples with the given lookback and horizon.
    pub fn sample_count(&self, lookback: usize, horizon: usize, stride: usize) -> usize {
        match self.len().checked_sub(lookback + horizon) {
            Some(extra) => extra / stride.max(1) + 1,
            None => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: SplitView,
    pub val: SplitView,
    pub test: SplitView,
}

impl Splits {
    /// Last row (exclusive) of the training segment; the only rows that may
    /// inform fitted statistics.
    pub fn train_end(&self) -> usize {
        self.train.end
    }
}

pub fn split(total_len: usize, plan: SplitPlan, lookback: usize) -> Result<Splits> {
    let SplitPlan { train, val, test } = plan;
    let used = train + val + test;
    if used > total_len {
        return Err(Error::Bounds(format!(
            "split {train}/{val}/{test} needs {used} rows, dataset has {total_len}"
        )));
    }
    if train < lookback || val == 0 || test == 0 {
        return Err(Error::Bounds(format!(
            "split {train}/{val}/{test} too small for lookback {lookback}"
        )));
    }
    Ok(Splits {
        train: SplitView { start: 0, end: train },
        val: SplitView {
            start: train - lookback,
            end: train + val,
        },
        test: SplitView {
            start: train + val - lookback,
            end: used,
        },
    })
}

/// Per-channel standardisation with statistics from the training rows only.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(values: &DenseArray, train_end: usize) -> Result<Self> {
        if train_end < 2 || train_end > values.cols() {
            return Err(Error::Bounds(format!("scaler fit on {train_end} rows")));
        }
        let n = train_end as f64;
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for c in 0..values.rows() {
            let row = &values.row(c)[..train_end];
            let m = row.iter().sum::<f64>() / n;
            let s = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            mean.push(m);
            std.push(if s < 1e-12 { 1.0 } else { s });
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, values: &DenseArray) -> DenseArray {
        let mut out = values.clone();
        for c in 0..out.rows() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.row_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub lookback: usize,
    pub exo_lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            exo_lookback: lookback,
            horizon,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSample {
    /// `[C, L]`
    pub endogenous: DenseArray,
    /// `[N, L_ex]`, ending at the forecast origin.
    pub exogenous: DenseArray,
    /// `[C, H]`, starting right after the lookback window.
    pub target: DenseArray,
    pub window_start: usize,
}

/// Lazily materialised sliding windows over one split view. Every channel is
/// both an endogenous target and an exogenous covariate.
#[derive(Clone, Debug)]
pub struct SampleSet {
    values: Arc<DenseArray>,
    view: SplitView,
    spec: WindowSpec,
    count: usize,
}

pub fn make_samples(values: Arc<DenseArray>, view: SplitView, spec: WindowSpec) -> Result<SampleSet> {
    if spec.lookback == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Config(format!("invalid window spec {spec:?}")));
    }
    if spec.exo_lookback == 0 || spec.exo_lookback > spec.lookback {
        return Err(Error::Config(format!(
            "exogenous lookback {} must be in 1..={}",
            spec.exo_lookback, spec.lookback
        )));
    }
    if view.end > values.cols() {
        return Err(Error::Bounds(format!(
            "view {view:?} beyond {} rows",
            values.cols()
        )));
    }
    let count = view.sample_count(spec.lookback, spec.horizon, spec.stride);
    Ok(SampleSet {
        values,
        view,
        spec,
        count,
    })
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn spec(&self) -> WindowSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.values.rows()
    }

    pub fn window_start(&self, i: usize) -> usize {
        self.view.start + i * self.spec.stride
    }

    pub fn get(&self, i: usize) -> ForecastSample {
        assert!(i < self.count, "sample {i} out of {}", self.count);
        let t = self.window_start(i);
        let WindowSpec {
            lookback,
            exo_lookback,
            horizon,
            ..
        } = self.spec;
        let origin = t + lookback;
        let cut = |a: usize, b: usize| self.values.columns(a, b).expect("window inside view");
        ForecastSample {
            endogenous: cut(t, origin),
            exogenous: cut(origin - exo_lookback, origin),
            target: cut(origin, origin + horizon),
            window_start: t,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = ForecastSample> + '_ {
        (0..self.count).map(|i| self.get(i))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardises each row of `x` (`[channels, time]`) by its own mean and
/// population standard deviation, floored at [`NORM_EPS`].
pub fn instance_normalize(x: &DenseArray) -> (DenseArray, InstanceNormState) {
    let n = x.cols() as f64;
    let mut out = x.clone();
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for c in 0..x.rows() {
        let row = x.row(c);
        let m = if row.iter().all(|&v| v == row[0]) {
            row[0]
        } else {
            row.iter().sum::<f64>() / n
        };
        let s = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
            .sqrt()
            .max(NORM_EPS);
        out.row_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        means.push(m);
        stds.push(s);
    }
    (out, InstanceNormState { mean: means, std: stds })
}

pub fn denormalize(pred: &DenseArray, state: &InstanceNormState) -> Result<DenseArray> {
    if pred.ndim() != 2 || pred.rows() != state.mean.len() {
        return Err(Error::Shape(format!(
            "prediction {:?} for {} normalised channels",
            pred.shape(),
            state.mean.len()
        )));
    }
    let mut out = pred.clone();
    for c in 0..out.rows() {
        let (m, s) = (state.mean[c], state.std[c]);
        out.row_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}
