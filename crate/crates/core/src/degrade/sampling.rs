use image::RgbImage;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{degrade, level_to_params, LevelVector, NUM_TYPES};
use crate::error::Result;
use crate::task::TaskVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Target is always the clean image; `t` encodes the input level.
    Absolute,
    /// Target is degraded at a lower level; `t = l_in - l_gt`.
    Relative,
}

/// How a pair's levels were drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One degradation type active, uniform level.
    SingleUniform,
    /// All types active, each level in `{0, max}`.
    AllBinary,
    /// All types active, uniform levels.
    AllUniform,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::SingleUniform, Strategy::AllBinary, Strategy::AllUniform];
}

/// Which degradation types a sampler may activate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveTypes(pub [bool; NUM_TYPES]);

impl ActiveTypes {
    pub const ALL: ActiveTypes = ActiveTypes([true; NUM_TYPES]);
    pub const DENOISE: ActiveTypes = ActiveTypes([false, true, false]);

    fn indices(&self) -> Vec<usize> {
        (0..NUM_TYPES).filter(|&d| self.0[d]).collect()
    }
}

impl Default for ActiveTypes {
    fn default() -> Self {
        ActiveTypes::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: usize,
    pub l_in: LevelVector,
    pub l_gt: LevelVector,
    pub seed: u64,
    pub strategy: Strategy,
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub input: RgbImage,
    pub target: RgbImage,
    pub task: TaskVector,
    pub provenance: Provenance,
}

/// Snaps a level onto the training grid: blur stride 0.1, noise stride 1,
/// jpeg quality stride 2 (with level 0 meaning uncompressed).
fn snap_level(d: usize, l: f64) -> f64 {
    match d {
        0 => (l * 40.0).round() / 40.0,
        1 => (l * 50.0).round() / 50.0,
        _ => {
            let q = 2.0 * ((100.0 - 90.0 * l) / 2.0).round();
            if q >= 100.0 {
                0.0
            } else {
                (100.0 - q) / 90.0
            }
        }
    }
}

fn ordered_pair<R: Rng + ?Sized>(d: usize, rng: &mut R) -> (f64, f64) {
    let a = snap_level(d, rng.random::<f64>());
    let b = snap_level(d, rng.random::<f64>());
    (a.max(b), a.min(b))
}

fn draw_levels<R: Rng + ?Sized>(
    strategy: Strategy,
    mode: SampleMode,
    active: &ActiveTypes,
    rng: &mut R,
) -> (LevelVector, LevelVector) {
    let mut l_in = [0.0; NUM_TYPES];
    let mut l_gt = [0.0; NUM_TYPES];
    let types = active.indices();
    match strategy {
        Strategy::SingleUniform => {
            let d = types[rng.random_range(0..types.len())];
            (l_in[d], l_gt[d]) = ordered_pair(d, rng);
        }
        Strategy::AllBinary => {
            for &d in &types {
                let hi = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                let lo = if rng.random_bool(0.5) { hi } else { 0.0 };
                (l_in[d], l_gt[d]) = (hi, lo);
            }
        }
        Strategy::AllUniform => {
            for &d in &types {
                (l_in[d], l_gt[d]) = ordered_pair(d, rng);
            }
        }
    }
    if mode == SampleMode::Absolute {
        l_gt = [0.0; NUM_TYPES];
    }
    (LevelVector(l_in), LevelVector(l_gt))
}

/// Draws a pair with a strategy picked uniformly at random.
pub fn sample_training_pair<R: Rng + ?Sized>(
    clean: &RgbImage,
    source_id: usize,
    mode: SampleMode,
    active: &ActiveTypes,
    rng: &mut R,
) -> Result<SamplePair> {
    let strategy = Strategy::ALL[rng.random_range(0..Strategy::ALL.len())];
    sample_with_strategy(clean, source_id, mode, active, strategy, rng.next_u64())
}

/// Deterministic in `(clean, strategy, seed)`. Input and target share one
/// noise realization so the noise difference between them is learnable.
pub fn sample_with_strategy(
    clean: &RgbImage,
    source_id: usize,
    mode: SampleMode,
    active: &ActiveTypes,
    strategy: Strategy,
    seed: u64,
) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l_in, l_gt) = draw_levels(strategy, mode, active, &mut rng);
    let noise_seed = rng.next_u64();
    let input = degrade(clean, &level_to_params(&l_in)?, noise_seed)?;
    let target = degrade(clean, &level_to_params(&l_gt)?, noise_seed)?;
    let task = TaskVector(std::array::from_fn(|d| l_in.0[d] - l_gt.0[d]));
    Ok(SamplePair {
        input,
        target,
        task,
        provenance: Provenance {
            source_id,
            l_in,
            l_gt,
            seed,
            strategy,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn clean() -> RgbImage {
        RgbImage::from_fn(24, 24, |x, y| image::Rgb([(x * 10) as u8, (y * 10) as u8, 128]))
    }

    #[test]
    fn task_is_level_difference() {
        let img = clean();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = sample_training_pair(&img, 0, SampleMode::Relative, &ActiveTypes::ALL, &mut rng).unwrap();
            for d in 0..NUM_TYPES {
                assert_eq!(p.task.0[d], p.provenance.l_in.0[d] - p.provenance.l_gt.0[d]);
                assert!(p.task.0[d] >= 0.0 && p.task.0[d] <= 1.0);
            }
        }
    }

    #[test]
    fn absolute_mode_targets_clean() {
        let img = clean();
        let p = sample_with_strategy(&img, 0, SampleMode::Absolute, &ActiveTypes::ALL, Strategy::AllBinary, 3).unwrap();
        assert_eq!(p.target, img);
        assert_eq!(p.task.0, p.provenance.l_in.0);
        // Find a draw where everything is maximal.
        let full = (0..500u64)
            .map(|s| {
                sample_with_strategy(&img, 0, SampleMode::Absolute, &ActiveTypes::ALL, Strategy::AllBinary, s).unwrap()
            })
            .find(|p| p.provenance.l_in.0 == [1.0; 3])
            .expect("some seed activates every type");
        assert_eq!(full.task, TaskVector([1.0, 1.0, 1.0]));
        assert_eq!(full.target, img);
    }

    #[test]
    fn strategies_equally_frequent() {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([100, 100, 100]));
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut counts: HashMap<Strategy, usize> = HashMap::new();
        let n = 3000;
        for _ in 0..n {
            let p = sample_training_pair(&img, 0, SampleMode::Relative, &ActiveTypes::ALL, &mut rng).unwrap();
            *counts.entry(p.provenance.strategy).or_default() += 1;
        }
        for s in Strategy::ALL {
            let f = counts[&s] as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.03, "{s:?}: {f}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let img = clean();
        let a = sample_with_strategy(
            &img,
            4,
            SampleMode::Relative,
            &ActiveTypes::ALL,
            Strategy::AllUniform,
            77,
        )
        .unwrap();
        let b = sample_with_strategy(
            &img,
            4,
            SampleMode::Relative,
            &ActiveTypes::ALL,
            Strategy::AllUniform,
            77,
        )
        .unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.target, b.target);
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn denoise_only_touches_noise() {
        let img = clean();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = sample_training_pair(&img, 0, SampleMode::Relative, &ActiveTypes::DENOISE, &mut rng).unwrap();
            assert_eq!(p.provenance.l_in.0[0], 0.0);
            assert_eq!(p.provenance.l_in.0[2], 0.0);
        }
    }

    #[test]
    fn snapping_hits_training_strides() {
        for i in 0..=100 {
            let l = i as f64 / 100.0;
            let r = 4.0 * snap_level(0, l);
            assert!((r * 10.0 - (r * 10.0).round()).abs() < 1e-9);
            let s = 50.0 * snap_level(1, l);
            assert!((s - s.round()).abs() < 1e-9);
            let lj = snap_level(2, l);
            if lj > 0.0 {
                let q = 100.0 - 90.0 * lj;
                assert!((q / 2.0 - (q / 2.0).round()).abs() < 1e-9 && (10.0..100.0).contains(&q.round()));
            }
        }
    }
}
