//! Temporal window smoothing: a PCA basis fitted once on the full training
//! series and applied to every exogenous lookback window by projecting onto
//! the top-`k` principal directions and reconstructing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::{covariance, eigh};
use crate::tensor::DenseArray;

pub const DEFAULT_THRESHOLD: f64 = 0.90;
const FORMAT_HEADER: &str = "TWS-WHITENER";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TwsWhitener {
    /// Per-feature mean over the training series.
    pub mean: Vec<f64>,
    /// Full spectrum, descending.
    pub eigenvalues: Vec<f64>,
    /// `N×k`, orthonormal columns.
    pub basis: DenseArray,
    pub k: usize,
    pub threshold: f64,
    /// Project `E − μ` (true) rather than `E` itself (false).
    pub centered_projection: bool,
    /// Set when the training data had no variance.
    pub degenerate: bool,
}

/// Smallest `k` whose leading eigenvalues reach `threshold` of the total,
/// with the ratio they capture. A zero spectrum yields `(1, 1.0)`.
pub fn select_k(eigenvalues: &[f64], threshold: f64) -> (usize, f64) {
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 {
        return (1, 1.0);
    }
    let mut cumulative = 0.0;
    for (i, &lambda) in eigenvalues.iter().enumerate() {
        cumulative += lambda;
        let ratio = cumulative / total;
        if ratio >= threshold {
            return (i + 1, ratio);
        }
    }
    (eigenvalues.len(), 1.0)
}

impl TwsWhitener {
    /// Fits on a `[features, time]` training series.
    pub fn fit(train_series: &DenseArray, threshold: f64) -> Result<Self> {
        Self::fit_with_mode(train_series, threshold, true)
    }

    pub fn fit_with_mode(
        train_series: &DenseArray,
        threshold: f64,
        centered_projection: bool,
    ) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::Config(format!("threshold {threshold} outside (0, 1]")));
        }
        if train_series.ndim() != 2 {
            return Err(Error::Shape(format!(
                "training series must be 2-d, got {:?}",
                train_series.shape()
            )));
        }
        let (n, len) = (train_series.rows(), train_series.cols());
        if len < 2 {
            return Err(Error::InsufficientData(format!(
                "whitener fit needs at least 2 time steps, got {len}"
            )));
        }
        let mean: Vec<f64> = (0..n)
            .map(|i| train_series.row(i).iter().sum::<f64>() / len as f64)
            .collect();
        let mut centered = train_series.clone();
        for (i, mu) in mean.iter().enumerate() {
            centered.row_mut(i).iter_mut().for_each(|v| *v -= mu);
        }
        let cov = covariance(&centered)?;
        let eig = eigh(&cov)?;

        let total: f64 = eig.eigenvalues.iter().sum();
        let scale = 1.0 + mean.iter().map(|m| m * m).fold(0.0, f64::max);
        if total <= 1e-24 * scale {
            log::warn!("whitener fit on data with zero variance; keeping one basis vector");
            let mut basis = DenseArray::zeros(&[n, 1]);
            basis.set(0, 0, 1.0);
            return Ok(Self {
                mean,
                eigenvalues: eig.eigenvalues,
                basis,
                k: 1,
                threshold,
                centered_projection,
                degenerate: true,
            });
        }

        let (k, _) = select_k(&eig.eigenvalues, threshold);
        let basis = eig.eigenvectors.columns(0, k)?;
        Ok(Self {
            mean,
            eigenvalues: eig.eigenvalues,
            basis,
            k,
            threshold,
            centered_projection,
            degenerate: false,
        })
    }

    /// Builds a whitener from known statistics. `basis` must be `N×N` or
    /// wider than the selected `k`; only its first `k` columns are kept.
    pub fn from_parts(
        mean: Vec<f64>,
        eigenvalues: Vec<f64>,
        eigenvectors: &DenseArray,
        threshold: f64,
    ) -> Result<Self> {
        let n = mean.len();
        if eigenvalues.len() != n || eigenvectors.shape() != [n, n] {
            return Err(Error::Shape("mean, eigenvalues and eigenvectors disagree".into()));
        }
        let (k, _) = select_k(&eigenvalues, threshold);
        let degenerate = eigenvalues.iter().sum::<f64>() <= 0.0;
        Ok(Self {
            basis: eigenvectors.columns(0, k)?,
            mean,
            eigenvalues,
            k,
            threshold,
            centered_projection: true,
            degenerate,
        })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    /// `Σ_{i≤k} λᵢ / Σ λᵢ`; 1.0 for a degenerate fit.
    pub fn captured_variance_ratio(&self) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if self.degenerate || total <= 0.0 {
            return 1.0;
        }
        self.eigenvalues[..self.k].iter().sum::<f64>() / total
    }

    /// Projects a `[features, time]` window onto the retained basis and maps
    /// it back to the original coordinates.
    pub fn whiten_window(&self, window: &DenseArray) -> Result<DenseArray> {
        let n = self.features();
        if window.ndim() != 2 || window.rows() != n {
            return Err(Error::Shape(format!(
                "window {:?} for a whitener over {n} features",
                window.shape()
            )));
        }
        let len = window.cols();
        let mut input = window.clone();
        if self.centered_projection {
            for (i, mu) in self.mean.iter().enumerate() {
                input.row_mut(i).iter_mut().for_each(|v| *v -= mu);
            }
        }
        // Ψ = Vᵀ·E, O = V·Ψ + μ
        let components = self.basis.transpose().matmul(&input)?;
        let mut out = self.basis.matmul(&components)?;
        for (i, mu) in self.mean.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v += mu);
        }
        debug_assert_eq!(out.shape(), [n, len]);
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let join = |vals: &[f64]| {
            vals.iter()
                .map(|v| format!("{v:?}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        writeln!(s, "{FORMAT_HEADER} {FORMAT_VERSION}").unwrap();
        writeln!(s, "n {}", self.features()).unwrap();
        writeln!(s, "k {}", self.k).unwrap();
        writeln!(s, "threshold {:?}", self.threshold).unwrap();
        writeln!(s, "centered {}", u8::from(self.centered_projection)).unwrap();
        writeln!(s, "degenerate {}", u8::from(self.degenerate)).unwrap();
        writeln!(s, "mean {}", join(&self.mean)).unwrap();
        writeln!(s, "eigenvalues {}", join(&self.eigenvalues)).unwrap();
        writeln!(s, "basis {}", join(self.basis.data())).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("whitener: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        match header.split_whitespace().collect::<Vec<_>>()[..] {
            [FORMAT_HEADER, v] if v == FORMAT_VERSION.to_string() => {}
            _ => return Err(bad(format!("unsupported header {header:?}"))),
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {name}")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(format!("expected {name}, found {line:?}")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let scalar = |v: Vec<String>, name: &str| -> Result<String> {
            match &v[..] {
                [one] => Ok(one.clone()),
                _ => Err(bad(format!("{name} must hold one value"))),
            }
        };
        let floats = |v: Vec<String>, name: &str| -> Result<Vec<f64>> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{name}: {e}"))))
                .collect()
        };
        let int = |s: String, name: &str| -> Result<usize> {
            s.parse().map_err(|e| bad(format!("{name}: {e}")))
        };

        let n = int(scalar(field("n")?, "n")?, "n")?;
        let k = int(scalar(field("k")?, "k")?, "k")?;
        let threshold = floats(field("threshold")?, "threshold")?;
        let centered = int(scalar(field("centered")?, "centered")?, "centered")? == 1;
        let degenerate = int(scalar(field("degenerate")?, "degenerate")?, "degenerate")? == 1;
        let mean = floats(field("mean")?, "mean")?;
        let eigenvalues = floats(field("eigenvalues")?, "eigenvalues")?;
        let basis = floats(field("basis")?, "basis")?;
        if threshold.len() != 1 || mean.len() != n || eigenvalues.len() != n || k == 0 || k > n {
            return Err(bad("inconsistent sizes".into()));
        }
        let basis = DenseArray::new(vec![n, k], basis).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            mean,
            eigenvalues,
            basis,
            k,
            threshold: threshold[0],
            centered_projection: centered,
            degenerate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_selection_boundary_is_inclusive() {
        assert_eq!(select_k(&[5.0, 3.0, 1.0, 1.0], 0.9), (3, 0.9));
        assert_eq!(select_k(&[5.0, 3.0, 1.0, 1.0], 1.0).0, 4);
        assert_eq!(select_k(&[5.0, 3.0, 1.0, 1.0], 0.5), (1, 0.5));
        assert_eq!(select_k(&[0.0, 0.0], 0.9), (1, 1.0));
    }

    #[test]
    fn threshold_one_keeps_everything_and_reconstructs() {
        let data = DenseArray::new(
            vec![3, 6],
            vec![1., 2., 0., 4., 3., 1., 0., 1., 5., 2., 2., 3., 7., 1., 1., 0., 2., 2.],
        )
        .unwrap();
        let w = TwsWhitener::fit(&data, 1.0).unwrap();
        assert_eq!(w.k, 3);
        assert!((w.captured_variance_ratio() - 1.0).abs() < 1e-12);
        let out = w.whiten_window(&data).unwrap();
        assert!(out.max_abs_diff(&data) < 1e-8);
    }

    #[test]
    fn zero_variance_is_degenerate_not_an_error() {
        let data = DenseArray::full(&[3, 10], 2.5);
        let w = TwsWhitener::fit(&data, 0.9).unwrap();
        assert!(w.degenerate);
        assert_eq!(w.k, 1);
        assert_eq!(w.basis.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(w.captured_variance_ratio(), 1.0);
    }

    #[test]
    fn window_equal_to_mean_is_fixed() {
        let data = DenseArray::new(vec![2, 4], vec![1., 3., 2., 6., 0., 1., 5., 2.]).unwrap();
        let w = TwsWhitener::fit(&data, 0.5).unwrap();
        let mut window = DenseArray::zeros(&[2, 5]);
        for i in 0..2 {
            window.row_mut(i).iter_mut().for_each(|v| *v = w.mean[i]);
        }
        assert!(w.whiten_window(&window).unwrap().max_abs_diff(&window) < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = DenseArray::zeros(&[3, 10]);
        assert!(TwsWhitener::fit(&data, 0.0).is_err());
        assert!(TwsWhitener::fit(&data, 1.1).is_err());
        assert!(TwsWhitener::fit(&DenseArray::zeros(&[3, 1]), 0.9).is_err());
        let w = TwsWhitener::fit(&DenseArray::new(vec![1, 3], vec![1., 2., 4.]).unwrap(), 0.9).unwrap();
        assert!(matches!(w.whiten_window(&DenseArray::zeros(&[2, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn text_format_round_trip() {
        let data = DenseArray::new(
            vec![3, 5],
            vec![0.1, 2.3, -1.0, 4.4, 0.0, 1.0, 0.5, 0.25, -3.0, 2.0, 9.0, 1.0, 1.5, 0.3, 0.7],
        )
        .unwrap();
        let w = TwsWhitener::fit(&data, 0.9).unwrap();
        let back = TwsWhitener::from_text(&w.to_text()).unwrap();
        assert_eq!(w, back);
        assert!(TwsWhitener::from_text("TWS-WHITENER 2\n").is_err());
    }
}
