//! Synthetic degradations (blur, noise, JPEG) and training-pair sampling.

mod blur;
mod dataset;
mod jpeg;
mod noise;
mod sampling;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use blur::{gaussian_blur, gaussian_taps, KERNEL_SIZE};
pub use dataset::{crop, load_png_dir, procedural_corpus, write_manifest, ManifestRecord};
pub use jpeg::{fdct, idct, jpeg_degrade, jpeg_with_tables, QuantTables, CHROMA_TABLE, LUMA_TABLE};
pub use noise::add_gaussian_noise;
pub use sampling::{
    sample_training_pair, sample_with_strategy, ActiveTypes, Provenance, SampleMode, SamplePair, Strategy,
};

use crate::error::{Error, Result};

/// Number of degradation types (blur, noise, jpeg).
pub const NUM_TYPES: usize = 3;

pub const MAX_BLUR: f64 = 4.0;
pub const MAX_SIGMA: f64 = 50.0;
pub const MIN_QUALITY: f64 = 10.0;
pub const MAX_QUALITY: f64 = 100.0;

/// Physical degradation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// Gaussian blur standard deviation, `[0, 4]`.
    pub r: f64,
    /// Noise standard deviation on the 0..255 scale, `[0, 50]`.
    pub sigma: f64,
    /// JPEG quality in `[10, 100]`, `None` for uncompressed.
    pub q: Option<f64>,
}

impl DegradationParams {
    pub const CLEAN: DegradationParams = DegradationParams {
        r: 0.0,
        sigma: 0.0,
        q: None,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_BLUR).contains(&self.r) {
            return Err(Error::range(format!("blur width {} outside [0, 4]", self.r)));
        }
        if !(0.0..=MAX_SIGMA).contains(&self.sigma) {
            return Err(Error::range(format!("noise sigma {} outside [0, 50]", self.sigma)));
        }
        if let Some(q) = self.q {
            if !(MIN_QUALITY..=MAX_QUALITY).contains(&q) {
                return Err(Error::range(format!("jpeg quality {q} outside [10, 100]")));
            }
        }
        Ok(())
    }

    /// Parses `r,sigma,q` where `q` may be `none`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [r, sigma, q] = parts.as_slice() else {
            return Err(Error::Config(format!("expected r,sigma,q, got {s:?}")));
        };
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("not a number: {v:?}")))
        };
        let q = if q.eq_ignore_ascii_case("none") {
            None
        } else {
            Some(num(q)?)
        };
        let p = DegradationParams {
            r: num(r)?,
            sigma: num(sigma)?,
            q,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Per-type degradation severity in `[0, 1]`, ordered (blur, noise, jpeg).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelVector(pub [f64; NUM_TYPES]);

impl LevelVector {
    pub const ZERO: LevelVector = LevelVector([0.0; NUM_TYPES]);

    pub fn new(levels: [f64; NUM_TYPES]) -> Result<Self> {
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::range(format!("levels {levels:?} outside [0, 1]")));
        }
        Ok(LevelVector(levels))
    }
}

/// Linear map from levels to physical parameters; jpeg level 0 means uncompressed.
pub fn level_to_params(l: &LevelVector) -> Result<DegradationParams> {
    let [lb, ln, lj] = LevelVector::new(l.0)?.0;
    Ok(DegradationParams {
        r: MAX_BLUR * lb,
        sigma: MAX_SIGMA * ln,
        q: (lj > 0.0).then_some(MAX_QUALITY - (MAX_QUALITY - MIN_QUALITY) * lj),
    })
}

pub fn params_to_level(p: &DegradationParams) -> Result<LevelVector> {
    p.validate()?;
    Ok(LevelVector([
        p.r / MAX_BLUR,
        p.sigma / MAX_SIGMA,
        p.q.map_or(0.0, |q| (MAX_QUALITY - q) / (MAX_QUALITY - MIN_QUALITY)),
    ]))
}

/// Blur, then noise, then JPEG; every stage rounds and clamps to 8 bits.
pub fn degrade(img: &RgbImage, params: &DegradationParams, noise_seed: u64) -> Result<RgbImage> {
    params.validate()?;
    let blurred = gaussian_blur(img, params.r)?;
    let noisy = add_gaussian_noise(&blurred, params.sigma, noise_seed)?;
    jpeg_degrade(&noisy, params.q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_levels_are_clean() {
        let p = level_to_params(&LevelVector::ZERO).unwrap();
        assert_eq!(p, DegradationParams::CLEAN);
    }

    #[test]
    fn grid_point_maps_to_published_params() {
        let p = level_to_params(&LevelVector([0.5, 0.5, 1.0])).unwrap();
        assert_eq!(p.r, 2.0);
        assert_eq!(p.sigma, 25.0);
        assert_eq!(p.q, Some(10.0));
        assert_eq!(level_to_params(&LevelVector([0.0, 0.0, 0.5])).unwrap().q, Some(55.0));
    }

    #[test]
    fn out_of_range_levels_rejected() {
        assert!(level_to_params(&LevelVector([1.2, 0.0, 0.0])).is_err());
        assert!(params_to_level(&DegradationParams {
            r: 0.0,
            sigma: 60.0,
            q: None
        })
        .is_err());
    }

    #[test]
    fn clean_pipeline_is_identity() {
        let img = RgbImage::from_fn(20, 12, |x, y| image::Rgb([(x * 11) as u8, (y * 17) as u8, 99]));
        assert_eq!(degrade(&img, &DegradationParams::CLEAN, 5).unwrap(), img);
    }

    #[test]
    fn parse_levels_argument() {
        let p = DegradationParams::parse("2, 25, none").unwrap();
        assert_eq!(
            p,
            DegradationParams {
                r: 2.0,
                sigma: 25.0,
                q: None
            }
        );
        assert_eq!(DegradationParams::parse("0,0,60").unwrap().q, Some(60.0));
        assert!(DegradationParams::parse("0,0").is_err());
        assert!(DegradationParams::parse("9,0,none").is_err());
    }

    proptest! {
        #[test]
        fn level_round_trip(a in 0.0f64..=1.0, b in 0.0f64..=1.0, c in 0.0f64..=1.0) {
            let l = LevelVector([a, b, c]);
            let back = params_to_level(&level_to_params(&l).unwrap()).unwrap();
            for d in 0..NUM_TYPES {
                prop_assert!((back.0[d] - l.0[d]).abs() < 1e-12);
            }
        }
    }
}
