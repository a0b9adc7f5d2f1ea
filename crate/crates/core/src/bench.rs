//! Timing of the memory update against full attention over the history.

use std::time::Instant;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::standard_normal;
use crate::memorypack::{MemoryState, SqueezeVariant};
use crate::model::{Model, TokenSequence};
use crate::tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n_segments: usize,
    pub variant: SqueezeVariant,
    /// Median time of a single update.
    pub seconds_per_update: f64,
    /// Fastest time to absorb all `n_segments` segments one by one.
    pub total_seconds: f64,
    /// Rows of ψ after the last update.
    pub state_tokens: usize,
    /// One full self-attention pass over all `n_segments` segments' tokens.
    pub baseline_seconds: f64,
}

fn min_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Times `update_memory` over histories of each length and the
/// uncompressed baseline. Totals are the minimum over `repeats` runs; the
/// much slower baseline uses at most three.
pub fn bench_memory(
    config: &ModelConfig,
    variants: &[SqueezeVariant],
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::config("bench.lengths", "must be positive and strictly ascending"));
    }
    let longest = *lengths.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = config.tokens_per_segment();
    let segments: Vec<TokenSequence> = (0..longest)
        .map(|i| {
            let start = (i * config.frames_per_segment) as i64;
            let positions = (0..l).map(|j| start + (j / config.tokens_per_frame()) as i64).collect();
            TokenSequence::new(standard_normal(&[l, config.d_model], &mut rng), positions)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &variant in variants {
        let model = Model::new(
            ModelConfig {
                squeeze_variant: variant,
                ..config.clone()
            },
            seed,
        )?;
        let psi0 = model.init_memory(
            &standard_normal(&[config.prompt_len, config.d_model], &mut rng),
            &standard_normal(&[config.tokens_per_frame(), config.d_model], &mut rng),
        )?;
        // Repeats are interleaved across lengths so slow phases of the
        // machine hit every length alike before the minimum is taken.
        let mut best = vec![f64::INFINITY; lengths.len()];
        let mut single: Vec<Vec<f64>> = vec![Vec::new(); lengths.len()];
        let mut state_tokens = vec![0; lengths.len()];
        for _ in 0..repeats.max(1) {
            for (k, &n) in lengths.iter().enumerate() {
                let t = Instant::now();
                let mut state: MemoryState = psi0.clone();
                for seg in &segments[..n] {
                    let u = Instant::now();
                    state = model.update_memory(&state, seg)?;
                    single[k].push(u.elapsed().as_secs_f64());
                }
                best[k] = best[k].min(t.elapsed().as_secs_f64());
                state_tokens[k] = state.psi.dims()[0];
            }
        }
        for (k, &n) in lengths.iter().enumerate() {
            let parts: Vec<&Tensor> = segments[..n].iter().map(|s| &s.tokens).collect();
            let history = Tensor::new(
                vec![n * l, config.d_model],
                parts.iter().flat_map(|t| t.data().iter().copied()).collect(),
            )?;
            let baseline = min_time(repeats.min(3), || model.full_attention_context(&history).map(drop))?;
            rows.push(BenchRow {
                n_segments: n,
                variant,
                seconds_per_update: crate::metrics::median(&mut single[k]).unwrap_or(f64::NAN),
                total_seconds: best[k],
                state_tokens: state_tokens[k],
                baseline_seconds: baseline,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: std::io::Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["n_segments", "variant", "seconds_per_update", "total_seconds", "state_tokens", "baseline_seconds"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.n_segments.to_string(),
            r.variant.to_string(),
            r.seconds_per_update.to_string(),
            r.total_seconds.to_string(),
            r.state_tokens.to_string(),
            r.baseline_seconds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Coefficient of determination of the least-squares line through `(x, y)`.
pub fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_of_exact_line_is_one() {
        assert!((linear_r2(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert!(linear_r2(&[1.0, 2.0, 3.0], &[1.0, 0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn rows_per_variant_and_constant_state() {
        let c = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            frames_per_segment: 2,
            frame_height: 8,
            frame_width: 8,
            memory_tokens: 4,
            memorize_window: 4,
            framepack_factors: vec![1, 4],
            ..ModelConfig::default()
        };
        let rows = bench_memory(&c, &[SqueezeVariant::A, SqueezeVariant::C], &[1, 2, 4], 1, 0).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.state_tokens == 4));
        assert!(bench_memory(&c, &[SqueezeVariant::A], &[2, 2], 1, 0).is_err());
    }
}
