//! Wall-clock latency of first versus subsequent effects under feature reuse.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{LatencySample, Resolution};
use crate::error::{Error, Result};
use crate::extract::{pad_to_multiple, ModulationModel};
use crate::task::TaskVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub samples: usize,
}

impl LatencyStats {
    /// Nearest-rank percentiles of `seconds`.
    pub fn from_samples(seconds: &[f64]) -> Result<Self> {
        if seconds.is_empty() {
            return Err(Error::range("no latency samples"));
        }
        let mut v = seconds.to_vec();
        v.sort_by(f64::total_cmp);
        let pick = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
        Ok(LatencyStats {
            median: pick(0.5),
            p10: pick(0.1),
            p90: pick(0.9),
            samples: v.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub resolution: Resolution,
    pub effects: usize,
    pub repetitions: usize,
    /// Prefix plus the first tail.
    pub first: LatencyStats,
    /// Each later effect, tail only.
    pub subsequent: LatencyStats,
    /// One full recomputation, for comparison.
    pub recompute: LatencyStats,
    pub samples: Vec<LatencySample>,
}

/// Times `repetitions` rounds (after `warmup` untimed rounds) of applying
/// `effects` to one random image at `res`.
pub fn bench_latency(
    model: &ModulationModel,
    res: Resolution,
    effects: &[TaskVector],
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if repetitions < 3 {
        return Err(Error::range("latency needs at least 3 repetitions"));
    }
    if effects.len() < 2 {
        return Err(Error::range("latency needs at least 2 effects"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let x = Tensor::from_fn([1, 3, res.height, res.width], |_| rng.random::<f32>());
    let (x, _, _) = pad_to_multiple(&x, model.config().head_stride)?;
    let tails = effects.iter().map(|t| model.tail(t)).collect::<Result<Vec<_>>>()?;

    let mut first = Vec::with_capacity(repetitions);
    let mut later = Vec::with_capacity(repetitions * (effects.len() - 1));
    let mut recompute = Vec::with_capacity(repetitions);
    let mut samples = Vec::new();
    for rep in 0..warmup + repetitions {
        let timed = rep >= warmup;
        let start = Instant::now();
        let feature = model.prefix_feature(&x)?;
        std::hint::black_box(tails[0].run_tail(&feature, &effects[0])?);
        let dt = start.elapsed().as_secs_f64();
        if timed {
            first.push(dt);
            samples.push(sample(0, dt));
        }
        for (m, (tail, t)) in tails.iter().zip(effects).enumerate().skip(1) {
            let start = Instant::now();
            std::hint::black_box(tail.run_tail(&feature, t)?);
            let dt = start.elapsed().as_secs_f64();
            if timed {
                later.push(dt);
                samples.push(sample(m, dt));
            }
        }
        let start = Instant::now();
        std::hint::black_box(tails[1].forward(&x, &effects[1])?);
        if timed {
            recompute.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(LatencyReport {
        resolution: res,
        effects: effects.len(),
        repetitions,
        first: LatencyStats::from_samples(&first)?,
        subsequent: LatencyStats::from_samples(&later)?,
        recompute: LatencyStats::from_samples(&recompute)?,
        samples,
    })
}

fn sample(effect: usize, seconds: f64) -> LatencySample {
    LatencySample {
        device: "cpu".into(),
        threads: 1,
        effect,
        seconds,
    }
}
