//! MSE objective, Adam, early-stopped training and checkpoint files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SampleSet;
use crate::error::{Error, Result};
use crate::eval::score;
use crate::model::{prepare_batch, Forecaster, ForecasterParams, RunConfig};
use crate::tensor::{DenseArray, Tape, Var};
use crate::tws::TwsWhitener;

/// Mean of squared differences over every element.
pub fn mse(pred: &DenseArray, target: &DenseArray) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Tape version of [`mse`]. For a `[B, C, H]` batch this is also the mean
/// of the per-sample losses, since every sample has the same size.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(pred),
            tape.shape(target)
        )));
    }
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter leaf, in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &ForecasterParams) -> Self {
        let mut sizes = Vec::new();
        params.for_each(&mut |_, a| sizes.push(a.len()));
        Self::new(config, &sizes)
    }

    /// One bias-corrected update of every slice in `params`. Gradients are
    /// checked before anything is modified.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} parameters and {} gradients for {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("parameter {i} changed size")));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} at element {j} is {}",
                    g[j]
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let (m_hat, v_hat) = (m[j] / c1, v[j] / c2);
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam step to a whole parameter tree. A non-finite gradient
/// aborts with the offending parameter's name and leaves `params` untouched.
pub fn adam_step(
    params: &mut ForecasterParams,
    grads: &ForecasterParams,
    state: &mut AdamState,
) -> Result<()> {
    let mut bad = None;
    grads.for_each(&mut |name, g| {
        if bad.is_none() && !g.is_finite() {
            bad = Some(name.to_string());
        }
    });
    if let Some(name) = bad {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let mut grad_slices = Vec::new();
    grads.for_each(&mut |_, g| grad_slices.push(g.data()));
    let mut leaves: Vec<Vec<f64>> = Vec::new();
    params.for_each(&mut |_, p| leaves.push(p.data().to_vec()));
    {
        let mut views: Vec<&mut [f64]> = leaves.iter_mut().map(Vec::as_mut_slice).collect();
        state.step(&mut views, &grad_slices)?;
    }
    let mut updated = leaves.into_iter();
    params.for_each_mut(&mut |_, p| {
        p.data_mut().copy_from_slice(&updated.next().expect("same traversal"));
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience counter over validation losses. Improvement is strict.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// `epoch` is 1-based.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            return StopDecision::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

impl StopReason {
    fn as_str(self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStopped => "early_stopped",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stop_reason: StopReason,
    pub steps: usize,
}

impl TrainReport {
    /// Tab-separated log: a header, one line per epoch, then `#` summary lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_mse\tval_mse\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{}\t{:?}\t{:?}", e.epoch, e.train_mse, e.val_mse);
        }
        let _ = writeln!(out, "# best_epoch\t{}", self.best_epoch);
        let _ = writeln!(out, "# stop_reason\t{}", self.stop_reason.as_str());
        let _ = writeln!(out, "# steps\t{}", self.steps);
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("train log: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("epoch\ttrain_mse\tval_mse") {
            return Err(bad("missing header".into()));
        }
        let mut epochs = Vec::new();
        let mut summary = HashMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.trim_start_matches("# ").split('\t').collect();
            if line.starts_with('#') {
                if fields.len() != 2 {
                    return Err(bad(format!("bad summary line {line:?}")));
                }
                summary.insert(fields[0].to_string(), fields[1].to_string());
                continue;
            }
            if fields.len() != 3 {
                return Err(bad(format!("bad epoch line {line:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            epochs.push(EpochRecord {
                epoch: fields[0].parse().map_err(|e| bad(format!("{e}")))?,
                train_mse: num(fields[1])?,
                val_mse: num(fields[2])?,
            });
        }
        let get = |k: &str| summary.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let best_epoch: usize = get("best_epoch")?.parse().map_err(|e| bad(format!("{e}")))?;
        let stop_reason = match get("stop_reason")?.as_str() {
            "completed" => StopReason::Completed,
            "early_stopped" => StopReason::EarlyStopped,
            other => return Err(bad(format!("unknown stop reason {other}"))),
        };
        let best_val_mse = epochs
            .iter()
            .find(|e| e.epoch == best_epoch)
            .map_or(f64::INFINITY, |e| e.val_mse);
        Ok(Self {
            epochs,
            best_epoch,
            best_val_mse,
            stop_reason,
            steps: get("steps")?.parse().map_err(|e| bad(format!("{e}")))?,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "tws-forecaster-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: RunConfig,
    whitener: Option<String>,
    params: Vec<NamedArray>,
}

/// A trained model plus the path of the whitener it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Forecaster,
    pub whitener_path: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Forecaster) -> Self {
        Self {
            model,
            whitener_path: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut params = Vec::new();
        self.model.params.for_each(&mut |name, a| {
            params.push(NamedArray {
                name: name.to_string(),
                shape: a.shape().to_vec(),
                data: a.data().to_vec(),
            })
        });
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config.clone(),
            whitener: self.whitener_path.clone(),
            params,
        };
        serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        let mut stored: HashMap<String, NamedArray> =
            file.params.into_iter().map(|p| (p.name.clone(), p)).collect();
        let mut params = ForecasterParams::init(&file.config, 0);
        let mut problems = Vec::new();
        params.for_each_mut(&mut |name, slot| match stored.remove(name) {
            None => problems.push(format!("{name}: missing")),
            Some(p) if p.shape != slot.shape() => problems.push(format!(
                "{name}: expected shape {:?}, found {:?}",
                slot.shape(),
                p.shape
            )),
            Some(p) => match DenseArray::new(p.shape, p.data) {
                Ok(a) => *slot = a,
                Err(e) => problems.push(format!("{name}: {e}")),
            },
        });
        problems.extend(stored.keys().map(|k| format!("{k}: unexpected parameter")));
        if !problems.is_empty() {
            problems.sort();
            return Err(Error::Shape(format!("checkpoint: {}", problems.join("; "))));
        }
        Ok(Self {
            model: Forecaster::from_params(file.config, params)?,
            whitener_path: file.whitener,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Gradients of one batch's loss with respect to every parameter.
pub fn batch_gradients(
    model: &Forecaster,
    tape: &mut Tape,
    batch: &crate::model::PreparedBatch,
) -> Result<(f64, ForecasterParams)> {
    let vars = model.bind(tape);
    let pred = model.forward(tape, &vars, batch, None)?;
    let target = tape.constant(batch.target.clone());
    let loss = mse_loss(tape, pred, target)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads = vars.map(&mut |_, v| tape.grad(*v).expect("parameters require grad"));
    Ok((value, grads))
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Trains `model` with Adam on `train`, early-stopping on `val` MSE, and
/// returns the best-validation model with the per-epoch report.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`] carrying the
/// best model seen so far (or the initial one).
pub fn train(
    model: Forecaster,
    train_set: &SampleSet,
    val_set: &SampleSet,
    whitener: Option<&TwsWhitener>,
) -> Result<(Forecaster, TrainReport)> {
    let cfg = model.config.clone();
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} training and {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    let mut model = model;
    let mut best = model.clone();
    let mut adam = AdamState::for_params(AdamConfig::new(cfg.learning_rate), &model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464C_4521);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut steps = 0;
    let mut stop_reason = StopReason::Completed;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<_> = chunk.iter().map(|&i| train_set.get(i)).collect();
            let batch = prepare_batch(&samples, whitener, &cfg)?;
            let mut tape = Tape::training(dropout_seed(cfg.seed, steps));
            let diverged = |_| Error::Diverged {
                epoch,
                step: steps,
                last_good: Box::new(Checkpoint::new(best.clone())),
            };
            let (loss, grads) = match batch_gradients(&model, &mut tape, &batch) {
                Err(Error::NonFinite(what)) => return Err(diverged(what)),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(diverged(String::new()));
            }
            match adam_step(&mut model.params, &grads, &mut adam) {
                Err(Error::NonFinite(what)) => return Err(diverged(what)),
                other => other?,
            }
            loss_sum += loss * samples.len() as f64;
            seen += samples.len();
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                let val = score(&model, val_set, whitener)?.0;
                epochs.push(EpochRecord {
                    epoch,
                    train_mse: loss_sum / seen as f64,
                    val_mse: val,
                });
                if stopper.observe(epoch, val) == StopDecision::Improved {
                    best = model.clone();
                }
                break 'epochs;
            }
        }
        let val = score(&model, val_set, whitener)?.0;
        let train_mse = loss_sum / seen as f64;
        info!("epoch {epoch}: train {train_mse:.6}, val {val:.6}");
        epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse: val,
        });
        match stopper.observe(epoch, val) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                debug!("no improvement for {} epochs", cfg.patience);
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }
    let report = TrainReport {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_mse: stopper.best,
        stop_reason,
        steps,
    };
    Ok((best, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 2.0);
        assert_eq!(mse(&a, &b).unwrap(), 4.0);
        assert!(mse(&a, &DenseArray::zeros(&[4])).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut state = AdamState::new(AdamConfig::new(0.1), &[1]);
        let mut p = vec![0.0];
        state.step(&mut [&mut p], &[&[1.0]]).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-9);

        let mut zero_state = AdamState::new(AdamConfig::new(0.1), &[2]);
        let mut q = vec![1.0, 2.0];
        zero_state.step(&mut [&mut q], &[&[0.0, 0.0]]).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        assert_eq!(zero_state.step, 1);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut state = AdamState::new(AdamConfig::new(0.1), &[2]);
        let mut p = vec![0.0, 0.0];
        let err = state.step(&mut [&mut p], &[&[1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(3);
        let decisions: Vec<_> = [5.0, 4.0, 4.1, 4.2, 4.3]
            .iter()
            .enumerate()
            .map(|(i, &v)| s.observe(i + 1, v))
            .collect();
        assert_eq!(decisions.last(), Some(&StopDecision::Stop));
        assert_eq!(s.best_epoch, 2);

        let mut t = EarlyStopping::new(3);
        assert_eq!(t.observe(1, 1.0), StopDecision::Improved);
        assert_eq!(t.observe(2, 1.0), StopDecision::Continue);
    }

    #[test]
    fn report_round_trip() {
        let report = TrainReport {
            epochs: vec![
                EpochRecord { epoch: 1, train_mse: 0.5, val_mse: 0.7 },
                EpochRecord { epoch: 2, train_mse: 0.1 + 0.2, val_mse: 0.6 },
            ],
            best_epoch: 2,
            best_val_mse: 0.6,
            stop_reason: StopReason::Completed,
            steps: 40,
        };
        assert_eq!(TrainReport::from_tsv(&report.to_tsv()).unwrap(), report);
    }
}
