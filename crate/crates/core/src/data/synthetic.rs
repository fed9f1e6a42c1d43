//! Seeded synthetic series for tests, demos and the desk-scale ablation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::TimeSeriesDataset;
use crate::error::Result;
use crate::tensor::DenseArray;

pub const ETT_FEATURES: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

fn names(channels: usize) -> Vec<String> {
    if channels == ETT_FEATURES.len() {
        ETT_FEATURES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..channels).map(|c| format!("x{c}")).collect()
    }
}

/// Noise-free sinusoids, one period and phase per channel.
pub fn sinusoids(len: usize, channels: usize, seed: u64) -> Result<TimeSeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = Uniform::new(0.0, 2.0 * PI);
    let mut data = Vec::with_capacity(len * channels);
    for c in 0..channels {
        let period = 24.0 + 12.0 * c as f64;
        let p = phase.sample(&mut rng);
        let amp = 1.0 + 0.5 * c as f64;
        data.extend((0..len).map(|t| amp * (2.0 * PI * t as f64 / period + p).sin()));
    }
    let values = DenseArray::new(vec![channels, len], data)?;
    TimeSeriesDataset::from_values("sinusoids", names(channels), values)
}

/// A rank-`rank` periodic signal mixed into `channels` variates, plus
/// independent Gaussian noise per channel at the given signal-to-noise ratio.
///
/// Each latent factor is a sum of two sinusoids with seeded periods; loadings
/// are standard normal. Noise variance for channel `c` is
/// `var(signal_c) / 10^(snr_db / 10)`.
pub fn low_rank_noisy(
    len: usize,
    channels: usize,
    rank: usize,
    snr_db: f64,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = Uniform::new(12.0, 72.0);
    let phase = Uniform::new(0.0, 2.0 * PI);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");

    let factors: Vec<Vec<f64>> = (0..rank)
        .map(|_| {
            let (p1, p2) = (period.sample(&mut rng), period.sample(&mut rng) * 2.0);
            let (q1, q2) = (phase.sample(&mut rng), phase.sample(&mut rng));
            (0..len)
                .map(|t| {
                    let t = t as f64;
                    (2.0 * PI * t / p1 + q1).sin() + 0.5 * (2.0 * PI * t / p2 + q2).sin()
                })
                .collect()
        })
        .collect();
    let loadings: Vec<Vec<f64>> = (0..channels)
        .map(|_| (0..rank).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();

    let noise_scale = 10f64.powf(-snr_db / 20.0);
    let mut data = Vec::with_capacity(len * channels);
    for load in &loadings {
        let signal: Vec<f64> = (0..len)
            .map(|t| load.iter().zip(&factors).map(|(w, f)| w * f[t]).sum())
            .collect();
        let mean = signal.iter().sum::<f64>() / len as f64;
        let var = signal.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / len as f64;
        let noise = Normal::new(0.0, var.sqrt() * noise_scale).expect("finite noise std");
        data.extend(signal.iter().map(|s| s + noise.sample(&mut rng)));
    }
    let values = DenseArray::new(vec![channels, len], data)?;
    TimeSeriesDataset::from_values("low_rank_noisy", names(channels), values)
}
