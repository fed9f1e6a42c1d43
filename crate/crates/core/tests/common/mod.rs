//! Shared test helpers: a central finite-difference gradient checker and
//! small fixtures.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tws_core::data::ForecastSample;
use tws_core::model::{prepare_batch, Bridging, Forecaster, PreparedBatch, RunConfig};
use tws_core::train::batch_gradients;
use tws_core::{DenseArray, Result, Tape, Var};

/// Step of the fourth-order central stencil. Large enough that rounding noise
/// (about 1e-13 for unit-scale losses) stays below the relative floor.
pub const FD_STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    /// Worst per-element relative error.
    pub max_rel: f64,
    /// Worst per-tensor `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
    pub max_tensor_rel: f64,
    pub checked: usize,
}

impl GradReport {
    fn absorb(&mut self, analytic: &[f64], numeric: &[f64]) {
        let (mut diff, mut scale) = (0.0f64, REL_FLOOR);
        for (a, n) in analytic.iter().zip(numeric) {
            self.max_rel = self.max_rel.max(rel_err(*a, *n));
            diff = diff.max((a - n).abs());
            scale = scale.max(a.abs()).max(n.abs());
        }
        self.max_tensor_rel = self.max_tensor_rel.max(diff / scale);
        self.checked += analytic.len();
    }
}

/// `f'(0)` from `(−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h`.
pub fn stencil(f: impl Fn(f64) -> f64) -> f64 {
    let h = FD_STEP;
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences, one input element at a time.
pub fn check_gradients(
    inputs: &[DenseArray],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> GradReport {
    check_gradients_on(Tape::new, inputs, f)
}

/// As [`check_gradients`], with every evaluation on a tape from `make_tape`
/// (e.g. a training tape with a fixed dropout seed).
pub fn check_gradients_on(
    make_tape: impl Fn() -> Tape,
    inputs: &[DenseArray],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> GradReport {
    let mut tape = make_tape();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let eval = |xs: &[DenseArray]| {
        let mut t = make_tape();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &v).expect("forward");
        t.value(out).item()
    };
    let mut report = GradReport::default();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).expect("param grad");
        let mut numeric = vec![0.0; x.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            *slot = stencil(|delta| {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                eval(&shifted)
            });
        }
        report.absorb(analytic.data(), &numeric);
    }
    report
}

/// The tiny gradient-check configuration: C=2, L=16, patch 4, D=8, 2 heads,
/// one block, H=4, no dropout.
pub fn tiny_config(bridging: Bridging, seed: u64) -> RunConfig {
    RunConfig {
        lookback: 16,
        exo_lookback: 16,
        horizon: 4,
        patch_len: 4,
        d_model: 8,
        heads: 2,
        blocks: 1,
        dropout: 0.0,
        bridging,
        tws_enabled: false,
        seed,
        ..RunConfig::default()
    }
}

pub fn random_sample(cfg: &RunConfig, channels: usize, exo: usize, seed: u64) -> ForecastSample {
    let mut r = rng(seed);
    ForecastSample {
        endogenous: DenseArray::normal(&[channels, cfg.lookback], 1.0, &mut r),
        exogenous: DenseArray::normal(&[exo, cfg.exo_lookback], 1.0, &mut r),
        target: DenseArray::normal(&[channels, cfg.horizon], 1.0, &mut r),
        window_start: 0,
    }
}

fn batch_loss(model: &Forecaster, batch: &PreparedBatch) -> f64 {
    let mut tape = Tape::new();
    batch_gradients(model, &mut tape, batch).expect("loss").0
}

/// Finite-difference check of the full batch MSE against every parameter.
pub fn check_model_gradients(model: &Forecaster, samples: &[ForecastSample]) -> GradReport {
    let batch = prepare_batch(samples, None, &model.config).expect("batch");
    let mut tape = Tape::new();
    let (_, grads) = batch_gradients(model, &mut tape, &batch).expect("grads");
    let mut analytic = Vec::new();
    let mut names = Vec::new();
    grads.for_each(&mut |n, g| {
        analytic.push(g.data().to_vec());
        names.push(n.to_string());
    });

    let mut report = GradReport::default();
    for (leaf, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                let mut idx = 0;
                m.params.for_each_mut(&mut |_, p| {
                    if idx == leaf {
                        p.data_mut()[j] += delta;
                    }
                    idx += 1;
                });
                batch_loss(&m, &batch)
            };
            *slot = stencil(shifted);
        }
        let before = report.max_rel;
        report.absorb(a, &numeric);
        if report.max_rel > before && std::env::var_os("GRAD_DEBUG").is_some() {
            eprintln!("{}: {:e} {:?} {:?}", names[leaf], report.max_rel, &a[..a.len().min(3)], &numeric[..a.len().min(3)]);
        }
    }
    report
}

/// Dataset sizes and published (train, val, test) window counts at L=96.
pub const BENCHMARK_SPLITS: [(&str, usize, [usize; 3]); 7] = [
    ("ETTh1", 17420, [8545, 2881, 2881]),
    ("ETTh2", 17420, [8545, 2881, 2881]),
    ("ETTm1", 69680, [34465, 11521, 11521]),
    ("ETTm2", 69680, [34465, 11521, 11521]),
    ("weather", 52696, [36792, 5271, 10540]),
    ("electricity", 26304, [18317, 2633, 5261]),
    ("traffic", 17544, [12185, 1757, 3509]),
];

/// Window counts produced by the split protocol for a dataset.
pub fn window_counts(name: &str, total: usize) -> [usize; 3] {
    use tws_core::data::{split, SplitPlan};
    let s = split(total, SplitPlan::for_dataset(name, total), 96).expect("split");
    [s.train.window_count(96), s.val.window_count(96), s.test.window_count(96)]
}
