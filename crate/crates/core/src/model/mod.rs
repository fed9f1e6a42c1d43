//! The forecaster: channel-independent patch tokens, one embedded token per
//! exogenous variate, and encoder blocks that route exogenous information to
//! the patch tokens through a learnable global token.
//!
//! Every channel of a batch becomes one token sequence, so a batch of `B`
//! samples with `C` channels runs as `B·C` sequences that share all weights.

mod config;
mod params;

pub use config::{Bridging, RunConfig, BENCHMARK_HORIZONS};
pub use params::{Attention, Block, ForecasterParams, Linear, Norm, Params};

use crate::data::{instance_normalize, ForecastSample};
use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Tape, Var};
use crate::tws::TwsWhitener;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits a `[1, L]` (or flat) series into consecutive non-overlapping
/// patches.
pub fn create_patches(x: &[f64], patch_len: usize) -> Result<Vec<Vec<f64>>> {
    if patch_len == 0 || x.is_empty() || !x.len().is_multiple_of(patch_len) {
        return Err(Error::Config(format!(
            "series of length {} cannot be cut into patches of {patch_len}",
            x.len()
        )));
    }
    Ok(x.chunks(patch_len).map(<[f64]>::to_vec).collect())
}

/// Patch embedding: `[.., patch_len] -> [.., D]`.
pub fn embed_endogenous(tape: &mut Tape, patches: Var, proj: &Linear<Var>) -> Result<Var> {
    tape.linear(patches, proj.weight, proj.bias)
}

/// Variate-as-token embedding: each `[L_ex]` row becomes one `[D]` token.
pub fn embed_exogenous(tape: &mut Tape, series: Var, proj: &Linear<Var>) -> Result<Var> {
    let expected = tape.shape(proj.weight)[0];
    let got = *tape.shape(series).last().unwrap_or(&0);
    if got != expected {
        return Err(Error::Shape(format!(
            "exogenous rows of length {got}, projector expects {expected}"
        )));
    }
    tape.linear(series, proj.weight, proj.bias)
}

/// Attention weights recorded during a forward pass, one entry per block.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// Exogenous tokens `[B, N, D]` straight out of the embedding.
    pub exo_tokens: Option<DenseArray>,
    /// `[S·heads, T, T]` per block.
    pub self_attention: Vec<DenseArray>,
    /// `[S·heads, 1, N]` per block (cross mode only).
    pub cross_attention: Vec<DenseArray>,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (seqs, len, d) = (s[0], s[1], s[2]);
    let x = tape.reshape(x, &[seqs, len, heads, d / heads])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[seqs * heads, len, d / heads])
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (seqs, len, dh) = (s[0] / heads, s[1], s[2]);
    let x = tape.reshape(x, &[seqs, heads, len, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[seqs, len, heads * dh])
}

/// Scaled dot-product attention over already-projected `[S·h, T, dh]` inputs.
/// Returns the context and the attention weights.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax(scores, 2).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFinite("attention scores".into()),
        other => other,
    })?;
    let ctx = tape.bmm(weights, v)?;
    Ok((ctx, weights))
}

/// Multi-head attention. `queries` is `[S, Tq, D]`; `context` is `[Sc, Tk, D]`
/// where `S = Sc · repeat`, so a context shared by several query sequences
/// is projected once and then repeated.
pub fn multi_head_attention(
    tape: &mut Tape,
    attn: &Attention<Var>,
    queries: Var,
    context: Var,
    heads: usize,
    repeat: usize,
) -> Result<(Var, Var)> {
    let q = tape.linear(queries, attn.query.weight, attn.query.bias)?;
    let mut k = tape.linear(context, attn.key.weight, attn.key.bias)?;
    let mut v = tape.linear(context, attn.value.weight, attn.value.bias)?;
    if repeat > 1 {
        k = tape.repeat_interleave(k, repeat)?;
        v = tape.repeat_interleave(v, repeat)?;
    }
    if tape.shape(q)[0] != tape.shape(k)[0] {
        return Err(Error::Shape(format!(
            "{} query sequences against {} context sequences",
            tape.shape(q)[0],
            tape.shape(k)[0]
        )));
    }
    let q = split_heads(tape, q, heads)?;
    let k = split_heads(tape, k, heads)?;
    let v = split_heads(tape, v, heads)?;
    let (ctx, weights) = attend(tape, q, k, v)?;
    let ctx = merge_heads(tape, ctx, heads)?;
    let out = tape.linear(ctx, attn.output.weight, attn.output.bias)?;
    Ok((out, weights))
}

fn residual_norm(tape: &mut Tape, x: Var, update: Var, norm: &Norm<Var>, dropout: f64) -> Result<Var> {
    let update = tape.dropout(update, dropout)?;
    let sum = tape.add(x, update)?;
    tape.layer_norm(sum, norm.gain, norm.bias, LAYER_NORM_EPS)
}

/// Kernel-size-1 convolution pair along the token axis with GELU between.
pub fn conv_layer(tape: &mut Tape, block: &Block<Var>, tokens: Var) -> Result<Var> {
    let h = tape.linear(tokens, block.conv_in.weight, block.conv_in.bias)?;
    let h = tape.gelu(h)?;
    tape.linear(h, block.conv_out.weight, block.conv_out.bias)
}

/// Exogenous context for one encoder block in cross mode.
#[derive(Clone, Copy, Debug)]
pub struct CrossContext {
    /// `[Sc, N, D]`
    pub tokens: Var,
    /// Query sequences per context sequence.
    pub repeat: usize,
}

/// One encoder block over `tokens` (`[S, T, D]`).
///
/// In cross mode the last token is the global token: after self-attention it
/// alone attends over the exogenous tokens, then the conv layer runs over
/// every token. Each step is residual and layer-normalised.
pub fn encoder_block(
    tape: &mut Tape,
    block: &Block<Var>,
    tokens: Var,
    exo: Option<CrossContext>,
    config: &RunConfig,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Var> {
    let heads = config.heads;
    let (attn, weights) = multi_head_attention(tape, &block.self_attn, tokens, tokens, heads, 1)?;
    if let Some(t) = trace.as_deref_mut() {
        t.self_attention.push(tape.value(weights).clone());
    }
    let mut x = residual_norm(tape, tokens, attn, &block.self_norm, config.dropout)?;

    match (exo, &block.cross_attn, &block.cross_norm) {
        (Some(ctx), Some(cross), Some(norm)) => {
            let len = tape.shape(x)[1];
            let patches = tape.slice(x, 1, 0, len - 1)?;
            let global = tape.slice(x, 1, len - 1, len)?;
            let (update, weights) =
                multi_head_attention(tape, cross, global, ctx.tokens, heads, ctx.repeat)?;
            if let Some(t) = trace {
                t.cross_attention.push(tape.value(weights).clone());
            }
            let global = residual_norm(tape, global, update, norm, config.dropout)?;
            x = tape.concat(&[patches, global], 1)?;
        }
        (None, None, None) => {}
        _ => {
            return Err(Error::Config(
                "cross-attention parameters and exogenous context must come together".into(),
            ))
        }
    }

    let update = conv_layer(tape, block, x)?;
    residual_norm(tape, x, update, &block.conv_norm, config.dropout)
}

/// Model inputs for a batch after whitening and instance normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub batch: usize,
    pub channels: usize,
    pub exo_vars: usize,
    /// `[B·C, L]`, instance-normalised.
    pub endogenous: DenseArray,
    /// `[B·N, L_ex]`, whitened (when enabled) then instance-normalised.
    pub exogenous: DenseArray,
    /// Lookback statistics per sequence, `[B·C]`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[B, C, H]`, raw scale.
    pub target: DenseArray,
}

/// Raw window → (TWS whiten) → instance norm for the exogenous side; raw
/// window → instance norm for the endogenous side.
pub fn prepare_batch(
    samples: &[ForecastSample],
    whitener: Option<&TwsWhitener>,
    config: &RunConfig,
) -> Result<PreparedBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    match (config.tws_enabled, whitener) {
        (true, None) => return Err(Error::Config("TWS is enabled but no whitener was given".into())),
        (false, Some(_)) => {
            return Err(Error::Config("TWS is disabled but a whitener was given".into()))
        }
        _ => {}
    }
    let (c, n) = (first.endogenous.rows(), first.exogenous.rows());
    let (mut endo, mut exo, mut target) = (Vec::new(), Vec::new(), Vec::new());
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for s in samples {
        let shapes_ok = s.endogenous.shape() == [c, config.lookback]
            && s.exogenous.shape() == [n, config.exo_lookback]
            && s.target.shape() == [c, config.horizon];
        if !shapes_ok {
            return Err(Error::Shape(format!(
                "sample shapes {:?}/{:?}/{:?} do not match the config",
                s.endogenous.shape(),
                s.exogenous.shape(),
                s.target.shape()
            )));
        }
        let (x, state) = instance_normalize(&s.endogenous);
        endo.extend_from_slice(x.data());
        mean.extend(state.mean);
        std.extend(state.std);

        let e = match whitener {
            Some(w) => w.whiten_window(&s.exogenous)?,
            None => s.exogenous.clone(),
        };
        exo.extend_from_slice(instance_normalize(&e).0.data());
        target.extend_from_slice(s.target.data());
    }
    let b = samples.len();
    Ok(PreparedBatch {
        batch: b,
        channels: c,
        exo_vars: n,
        endogenous: DenseArray::new(vec![b * c, config.lookback], endo)?,
        exogenous: DenseArray::new(vec![b * n, config.exo_lookback], exo)?,
        mean,
        std,
        target: DenseArray::new(vec![b, c, config.horizon], target)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forecaster {
    pub config: RunConfig,
    pub params: ForecasterParams,
}

impl Forecaster {
    /// Fresh model with parameters drawn from `config.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = ForecasterParams::init(&config, config.seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: RunConfig, params: ForecasterParams) -> Result<Self> {
        config.validate()?;
        let expected = ForecasterParams::init(&config, 0);
        let mismatch = expected.zip_with(&params, |name, e, p| {
            (e.shape() != p.shape()).then(|| {
                format!("{name}: expected {:?}, found {:?}", e.shape(), p.shape())
            })
        });
        let mut problems = Vec::new();
        mismatch.for_each(&mut |_, m| problems.extend(m.clone()));
        if expected.names() != params.names() {
            problems.push("parameter names differ from the config's layout".into());
        }
        if !problems.is_empty() {
            return Err(Error::Shape(problems.join("; ")));
        }
        Ok(Self { config, params })
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(&mut |_, a| tape.param(a.clone()))
    }

    /// Runs the model on a prepared batch and returns denormalised
    /// predictions `[B, C, H]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &Params<Var>,
        batch: &PreparedBatch,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (b, c, n) = (batch.batch, batch.channels, batch.exo_vars);
        let seqs = b * c;
        let (p, np, d) = (cfg.patch_len, cfg.num_patches(), cfg.d_model);

        // Endogenous: [B·C, L] -> [B·C, N_en, P] -> [B·C, N_en, D]
        let endo = tape.constant(batch.endogenous.clone());
        let patches = tape.reshape(endo, &[seqs, np, p])?;
        let z = embed_endogenous(tape, patches, &vars.patch_embed)?;
        let z = tape.dropout(z, cfg.dropout)?;

        // Exogenous: [B·N, L_ex] -> [B, N, D]
        let exo = tape.constant(batch.exogenous.clone());
        let h = embed_exogenous(tape, exo, &vars.exo_embed)?;
        let h = tape.reshape(h, &[b, n, d])?;
        if let Some(t) = trace.as_deref_mut() {
            t.exo_tokens = Some(tape.value(h).clone());
        }
        let h = tape.dropout(h, cfg.dropout)?;

        let (mut tokens, cross) = match cfg.bridging {
            Bridging::Cross => {
                let g = vars
                    .global_token
                    .ok_or_else(|| Error::Config("cross bridging needs a global token".into()))?;
                let g = tape.reshape(g, &[1, 1, d])?;
                let g = tape.repeat_interleave(g, seqs)?;
                let tokens = tape.concat(&[z, g], 1)?;
                (tokens, Some(CrossContext { tokens: h, repeat: c }))
            }
            Bridging::Concat => {
                let h = tape.repeat_interleave(h, c)?;
                (tape.concat(&[z, h], 1)?, None)
            }
        };

        for block in &vars.blocks {
            tokens = encoder_block(tape, block, tokens, cross, cfg, trace.as_deref_mut())?;
        }

        let kept = cfg.head_tokens();
        if tape.shape(tokens)[1] != kept {
            tokens = tape.slice(tokens, 1, 0, kept)?;
        }
        let flat = tape.reshape(tokens, &[seqs, kept * d])?;
        let y = tape.linear(flat, vars.head.weight, vars.head.bias)?;

        let hz = cfg.horizon;
        let expand = |v: &[f64]| {
            let data = v.iter().flat_map(|&x| std::iter::repeat_n(x, hz)).collect();
            DenseArray::new(vec![seqs, hz], data)
        };
        let scale = tape.constant(expand(&batch.std)?);
        let shift = tape.constant(expand(&batch.mean)?);
        let y = tape.mul(y, scale)?;
        let y = tape.add(y, shift)?;
        tape.reshape(y, &[b, c, hz])
    }

    /// Evaluation-mode predictions, one `[C, H]` array per sample.
    pub fn predict_batch(
        &self,
        samples: &[ForecastSample],
        whitener: Option<&TwsWhitener>,
    ) -> Result<Vec<DenseArray>> {
        let batch = prepare_batch(samples, whitener, &self.config)?;
        let mut tape = Tape::new();
        let vars = self.params.map(&mut |_, a| tape.constant(a.clone()));
        let out = self.forward(&mut tape, &vars, &batch, None)?;
        let (c, h) = (batch.channels, self.config.horizon);
        Ok(tape
            .value(out)
            .data()
            .chunks(c * h)
            .map(|chunk| DenseArray::new(vec![c, h], chunk.to_vec()).expect("[C, H] chunk"))
            .collect())
    }

    pub fn predict(&self, sample: &ForecastSample, whitener: Option<&TwsWhitener>) -> Result<DenseArray> {
        Ok(self
            .predict_batch(std::slice::from_ref(sample), whitener)?
            .remove(0))
    }
}
