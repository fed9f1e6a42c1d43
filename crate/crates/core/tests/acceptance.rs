//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. The full-scale check runs only when
//! `TWS_ETTH1` points at a downloaded ETTh1 CSV.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{check_gradients, check_model_gradients, random_sample, rng, tiny_config, window_counts, BENCHMARK_SPLITS};
use tws_core::data::{load_csv, make_samples, synthetic, write_csv, SplitView, WindowSpec};
use tws_core::eval::{run_cell, score, PreparedDataset};
use tws_core::model::{Bridging, Forecaster, ForecasterParams, RunConfig, BENCHMARK_HORIZONS};
use tws_core::spectral::eigh;
use tws_core::train::train;
use tws_core::tws::{select_k, TwsWhitener};
use tws_core::{DenseArray, Tape};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, format!("took {took:.1?}, limit {limit:?}"))
}

fn spectral_oracle() -> Outcome {
    let started = Instant::now();
    let (mut recon, mut ortho, mut trace) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let a = DenseArray::normal(&[6, 6], 1.0, &mut rng(seed));
        let mut s = a.clone();
        let t = a.transpose();
        s.data_mut().iter_mut().zip(t.data()).for_each(|(x, y)| *x = (*x + y) / 2.0);
        let e = eigh(&s).map_err(|e| e.to_string())?;
        recon = recon.max(e.reconstruct().max_abs_diff(&s));
        let v = &e.eigenvectors;
        ortho = ortho.max(v.transpose().matmul(v).unwrap().max_abs_diff(&DenseArray::eye(6)));
        let tr: f64 = (0..6).map(|i| s.at(i, i)).sum();
        let sum: f64 = e.eigenvalues.iter().sum();
        trace = trace.max((tr - sum).abs() / tr.abs().max(1e-300));
    }
    ensure(recon < 1e-8, format!("reconstruction error {recon:e}"))?;
    ensure(ortho < 1e-8, format!("orthonormality error {ortho:e}"))?;
    ensure(trace < 1e-8, format!("relative trace error {trace:e}"))?;
    within(Duration::from_secs(1), started)?;
    Ok(format!("max |A-VΛVᵀ| {recon:.1e}, |VᵀV-I| {ortho:.1e}, trace rel {trace:.1e}"))
}

fn tws_invariants() -> Outcome {
    let started = Instant::now();
    let train = synthetic::low_rank_noisy(2000, 7, 2, 10.0, 11).map_err(|e| e.to_string())?.values;
    let w = TwsWhitener::fit(&train, 0.90).map_err(|e| e.to_string())?;
    let full = TwsWhitener::fit(&train, 1.0).map_err(|e| e.to_string())?;
    let ratio = w.captured_variance_ratio();
    ensure((0.90..=1.0).contains(&ratio), format!("captured variance {ratio}"))?;
    ensure(full.k == 7, format!("threshold 1.0 kept k={}", full.k))?;
    let (mut idem, mut resid, mut exact) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let window = DenseArray::normal(&[7, 96], 2.0, &mut rng(1000 + seed));
        let out = w.whiten_window(&window).unwrap();
        idem = idem.max(w.whiten_window(&out).unwrap().max_abs_diff(&out));
        let mut r = window.clone();
        r.data_mut().iter_mut().zip(out.data()).for_each(|(a, b)| *a -= b);
        resid = resid.max(w.basis.transpose().matmul(&r).unwrap().max_abs());
        exact = exact.max(full.whiten_window(&window).unwrap().max_abs_diff(&window));
    }
    ensure(idem < 1e-8, format!("idempotence {idem:e}"))?;
    ensure(resid < 1e-8, format!("residual orthogonality {resid:e}"))?;
    ensure(exact < 1e-8, format!("k=N reconstruction {exact:e}"))?;
    within(Duration::from_secs(1), started)?;
    Ok(format!(
        "k={} ratio {ratio:.4}, idempotence {idem:.1e}, residual {resid:.1e}, k=N error {exact:.1e}",
        w.k
    ))
}

fn k_selection() -> Outcome {
    let (k, ratio) = select_k(&[5.0, 3.0, 1.0, 1.0], 0.9);
    ensure(k == 3 && ratio == 0.9, format!("k={k}, ratio={ratio:?}"))?;
    Ok("[5,3,1,1] at 0.90 -> k=3, ratio 0.9".into())
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let x = DenseArray::normal(&[2, 3, 4], 1.0, &mut rng(seed));
        let y = DenseArray::normal(&[2, 4, 3], 1.0, &mut rng(seed + 50));
        let w = DenseArray::normal(&[4, 5], 1.0, &mut rng(seed + 60));
        let g = DenseArray::normal(&[4], 1.0, &mut rng(seed + 70));
        let weights = DenseArray::normal(&[2, 3, 5], 1.0, &mut rng(seed + 80));
        let reduce = |t: &mut Tape, v| {
            let c = t.constant(weights.clone());
            let p = t.mul(v, c)?;
            t.sum(p)
        };
        let checks = [
            check_gradients(&[x.clone(), w.clone()], |t, v| {
                let b = t.constant(DenseArray::zeros(&[5]));
                let z = t.linear(v[0], v[1], b)?;
                let z = t.gelu(z)?;
                let z = t.softmax(z, 2)?;
                reduce(t, z)
            }),
            check_gradients(&[x.clone(), y.clone()], |t, v| {
                let z = t.bmm(v[0], v[1])?;
                let z = t.transpose(z)?;
                let z = t.permute(z, &[1, 0, 2])?;
                let z = t.reshape(z, &[3, 2, 3])?;
                let z = t.concat(&[z, z], 2)?;
                let z = t.slice(z, 2, 1, 6)?;
                let z = t.reshape(z, &[3, 2, 5])?;
                let z = t.permute(z, &[1, 0, 2])?;
                reduce(t, z)
            }),
            check_gradients(&[x.clone(), g.clone(), g.map(|v| -v)], |t, v| {
                let z = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let z = t.scale(z, 0.7)?;
                let z = t.sub(z, v[0])?;
                let z = t.add_bias(z, v[1])?;
                let z = t.repeat_interleave(z, 2)?;
                let z = t.mean(z)?;
                let zz = t.mul(z, z)?;
                t.add(zz, z)
            }),
        ];
        for r in checks {
            worst = worst.max(r.max_rel);
        }
        let cfg = tiny_config(Bridging::Cross, seed);
        let model = Forecaster::new(cfg.clone()).map_err(|e| e.to_string())?;
        let samples: Vec<_> = (0..2).map(|i| random_sample(&cfg, 2, 2, 100 * seed + i)).collect();
        worst = worst.max(check_model_gradients(&model, &samples).max_rel);
    }
    ensure(worst < 1e-4, format!("worst relative error {worst:e}"))?;
    within(Duration::from_secs(30), started)?;
    Ok(format!("worst relative error {worst:.1e} over ops and 10 forecaster seeds"))
}

fn shape_conformance() -> Outcome {
    let base = RunConfig { d_model: 16, heads: 2, blocks: 2, tws_enabled: false, ..RunConfig::default() };
    ensure(base.lookback == 96 && base.patch_len == 16 && base.num_patches() == 6, "N_en != 6")?;
    for h in BENCHMARK_HORIZONS {
        let cfg = RunConfig { horizon: h, ..base.clone() };
        let model = Forecaster::new(cfg.clone()).map_err(|e| e.to_string())?;
        let out = model.predict(&random_sample(&cfg, 7, 7, h as u64), None).map_err(|e| e.to_string())?;
        ensure(out.shape() == [7, h], format!("H={h}: output {:?}", out.shape()))?;
    }
    let concat = ForecasterParams::init(&RunConfig { bridging: Bridging::Concat, ..base }, 0);
    ensure(concat.global_token.is_none(), "concat mode has a global token")?;
    ensure(concat.names().iter().all(|n| !n.contains("global")), "concat parameter names mention a global token")?;
    Ok("N_en=6; C×H for H in 96/192/336/720; concat has no global token".into())
}

fn overfit_smoke() -> Outcome {
    let started = Instant::now();
    let cfg = RunConfig {
        horizon: 24,
        d_model: 32,
        heads: 4,
        blocks: 1,
        dropout: 0.0,
        tws_enabled: false,
        learning_rate: 3e-3,
        patience: 10,
        max_steps: Some(200),
        seed: 7,
        ..RunConfig::default()
    };
    let values = Arc::new(synthetic::sinusoids(1000, 2, 3).map_err(|e| e.to_string())?.values);
    let spec = WindowSpec::new(cfg.lookback, cfg.horizon);
    let tr = make_samples(values.clone(), SplitView { start: 0, end: 800 }, spec).unwrap();
    let va = make_samples(values, SplitView { start: 704, end: 1000 }, spec).unwrap();
    let run = || {
        let (m, r) = train(Forecaster::new(cfg.clone()).unwrap(), &tr, &va, None).map_err(|e| e.to_string())?;
        let mse = score(&m, &tr, None).map_err(|e| e.to_string())?.0;
        Ok::<_, String>((mse, r))
    };
    let (mse, report) = run()?;
    let (mse2, report2) = run()?;
    ensure(report.steps <= 200, format!("{} steps", report.steps))?;
    ensure(mse < 0.01, format!("training MSE {mse}"))?;
    ensure(mse.to_bits() == mse2.to_bits() && report == report2, "reruns differ")?;
    within(Duration::from_secs(120), started)?;
    Ok(format!("training MSE {mse:.2e} after {} steps, reruns identical", report.steps))
}

fn dataset_plumbing() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut ds = synthetic::low_rank_noisy(17420, 7, 2, 10.0, 1).map_err(|e| e.to_string())?;
    ds.name = "ETTh1".into();
    let path = dir.path().join("ETTh1.csv");
    write_csv(&ds, &path).map_err(|e| e.to_string())?;
    let back = load_csv(&path).map_err(|e| e.to_string())?;
    ensure(back.values == ds.values && back.dates == ds.dates, "CSV round trip changed the data")?;
    for (name, total, expected) in BENCHMARK_SPLITS {
        let got = window_counts(name, total);
        ensure(got == expected, format!("{name}: {got:?} vs {expected:?}"))?;
    }
    let mut note = String::from("round trip exact; benchmark window counts match for 7 datasets");
    if let Some(p) = std::env::var_os("TWS_ETTH1") {
        let real = load_csv(Path::new(&p)).map_err(|e| e.to_string())?;
        let got = window_counts("ETTh1", real.len());
        ensure(got == [8545, 2881, 2881], format!("downloaded ETTh1: {got:?}"))?;
        note.push_str("; downloaded ETTh1 checked");
    }
    Ok(note)
}

fn synthetic_ablation() -> Outcome {
    let started = Instant::now();
    let (mut with, mut without) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let mut ds = synthetic::low_rank_noisy(2000, 7, 2, 0.0, 100 + seed).map_err(|e| e.to_string())?;
        ds.name = format!("lowrank{seed}");
        let data = PreparedDataset::new(&ds, 96, 0.90).map_err(|e| e.to_string())?;
        let base = RunConfig {
            horizon: 24,
            d_model: 32,
            heads: 4,
            blocks: 1,
            learning_rate: 1e-3,
            max_steps: Some(400),
            bridging: Bridging::Cross,
            seed: 10 * seed,
            ..RunConfig::default()
        };
        let on = run_cell(&data, &RunConfig { tws_enabled: true, ..base.clone() }).map_err(|e| e.to_string())?;
        let off = run_cell(&data, &RunConfig { tws_enabled: false, ..base }).map_err(|e| e.to_string())?;
        per_seed.push(format!("{:.4}/{:.4}", on.mse, off.mse));
        with += on.mse / 5.0;
        without += off.mse / 5.0;
    }
    let summary = format!("cross+TWS {with:.4} vs cross w/o {without:.4} (seeds {})", per_seed.join(" "));
    ensure(with < without, summary.clone())?;
    within(Duration::from_secs(600), started)?;
    Ok(summary)
}

fn full_scale() -> Option<Outcome> {
    let path = std::env::var_os("TWS_ETTH1")?;
    Some((|| {
        let ds = load_csv(Path::new(&path)).map_err(|e| e.to_string())?;
        let data = PreparedDataset::new(&ds, 96, 0.90).map_err(|e| e.to_string())?;
        let r = run_cell(&data, &RunConfig::default()).map_err(|e| e.to_string())?;
        let rel = (r.mse - 0.379).abs() / 0.379;
        let summary = format!("ETTh1 H=96 cross+TWS test MSE {:.4} ({:.1}% from 0.379)", r.mse, 100.0 * rel);
        ensure(rel <= 0.15, summary.clone())?;
        Ok(summary)
    })())
}

fn ablate_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_tws");
    let csv = dir.path().join("synthetic.csv");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
    };
    run(&["synth", "--len", "800", "--seed", "5", "--out", csv.to_str().unwrap()])?;
    let mut reports = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.path().join(tag);
        run(&[
            "ablate", "--data", csv.to_str().unwrap(), "--horizons", "12,24", "--d-model", "8", "--heads", "2",
            "--blocks", "1", "--epochs", "2", "--max-steps", "6", "--seed", "42", "--out", out.to_str().unwrap(),
        ])?;
        reports.push(std::fs::read(out.join("results.tsv")).map_err(|e| e.to_string())?);
    }
    let rows = String::from_utf8_lossy(&reports[0]).lines().count() - 1;
    ensure(rows == 4 * 2 + 4, format!("{rows} result rows"))?;
    ensure(reports[0] == reports[1], "results.tsv differs between runs")?;
    Ok(format!("two ablate runs wrote identical results.tsv ({} bytes, {rows} rows)", reports[0].len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 spectral oracle", spectral_oracle),
        ("2 TWS invariants", tws_invariants),
        ("3 k-selection", k_selection),
        ("4 gradient suite", gradient_suite),
        ("5 shape conformance", shape_conformance),
        ("6 overfit smoke test", overfit_smoke),
        ("7 dataset plumbing", dataset_plumbing),
        ("8 synthetic ablation direction", synthetic_ablation),
        ("10 ablate determinism", ablate_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    match full_scale() {
        None => println!("SKIP  9 full-scale ETTh1 (advisory): set TWS_ETTH1 to a downloaded ETTh1.csv"),
        Some(Ok(d)) => println!("PASS  9 full-scale ETTh1 (advisory): {d}"),
        Some(Err(d)) => println!("FAIL  9 full-scale ETTh1 (advisory, not gating): {d}"),
    }
    println!("acceptance: {} of 9 gating criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
