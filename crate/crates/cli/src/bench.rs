//! Wall-clock forward timing on the calling thread.

use std::time::Instant;

use anyhow::Result;
use effconf_core::encoder::{EncoderConfig, EncoderModel};
use effconf_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::report::BenchRow;

pub const DEFAULT_REPS: usize = 5;

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times one inference forward per repetition after a single warmup run.
pub fn bench_model(model: &EncoderModel, label: &str, frames: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ frames as u64);
    let x = Tensor::from_fn(&[frames, model.config.input_features], |_| rng.gen_range(-1.0..1.0));
    let once = || -> Result<f64> {
        let g = Graph::inference();
        let start = Instant::now();
        let out = model.forward(&g, &g.constant(x.clone()), None)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out.sequence.value().data()[0]);
        Ok(ms)
    };
    once()?;
    let mut times = (0..reps.max(1)).map(|_| once()).collect::<Result<Vec<_>>>()?;
    times.sort_by(f64::total_cmp);
    Ok(BenchRow {
        preset: label.to_string(),
        frames,
        median_ms: percentile(&times, 0.5),
        p10_ms: percentile(&times, 0.1),
        p90_ms: percentile(&times, 0.9),
    })
}

/// One row per length; the model is built once.
pub fn bench(
    config: &EncoderConfig,
    label: &str,
    lengths: &[usize],
    reps: usize,
    seed: u64,
    mut on_row: impl FnMut(&BenchRow),
) -> Result<Vec<BenchRow>> {
    let model = EncoderModel::build(config, seed)?;
    lengths
        .iter()
        .map(|&n| {
            let row = bench_model(&model, label, n, reps, seed)?;
            on_row(&row);
            Ok(row)
        })
        .collect()
}
