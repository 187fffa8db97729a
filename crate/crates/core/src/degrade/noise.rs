use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Adds i.i.d. `N(0, sigma^2)` noise on the 0..255 scale, then clamps and rounds.
///
/// The underlying standard-normal field depends only on `seed`, so two calls
/// with the same seed and different `sigma` share one noise realization.
pub fn add_gaussian_noise(img: &RgbImage, sigma: f64, seed: u64) -> Result<RgbImage> {
    if !(0.0..=50.0).contains(&sigma) {
        return Err(Error::range(format!("noise sigma {sigma} outside [0, 50]")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = (*v as f64 + sigma * z).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_identity() {
        let img = RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8, y as u8, 200]));
        assert_eq!(add_gaussian_noise(&img, 0.0, 3).unwrap(), img);
    }

    #[test]
    fn deterministic_per_seed() {
        let img = RgbImage::from_pixel(16, 16, image::Rgb([128, 128, 128]));
        let a = add_gaussian_noise(&img, 10.0, 42).unwrap();
        let b = add_gaussian_noise(&img, 10.0, 42).unwrap();
        let c = add_gaussian_noise(&img, 10.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_std_matches_sigma() {
        let img = RgbImage::from_pixel(256, 256, image::Rgb([128, 128, 128]));
        let noisy = add_gaussian_noise(&img, 25.0, 7).unwrap();
        let diffs: Vec<f64> = noisy.iter().map(|&v| v as f64 - 128.0).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        let std = var.sqrt();
        assert!((std - 25.0).abs() / 25.0 < 0.03, "sample std {std}");
    }

    #[test]
    fn out_of_range_rejected() {
        let img = RgbImage::new(2, 2);
        assert!(add_gaussian_noise(&img, 50.5, 0).is_err());
    }
}
