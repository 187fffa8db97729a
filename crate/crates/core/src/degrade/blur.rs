use image::RgbImage;

use crate::error::{Error, Result};

pub const KERNEL_SIZE: usize = 21;
const RADIUS: usize = KERNEL_SIZE / 2;

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_taps(std: f64) -> [f64; KERNEL_SIZE] {
    let mut taps = [0.0; KERNEL_SIZE];
    if std == 0.0 {
        taps[RADIUS] = 1.0;
        return taps;
    }
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *t = (-d * d / (2.0 * std * std)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// 21x21 Gaussian blur with standard deviation `r` and reflect padding.
pub fn gaussian_blur(img: &RgbImage, r: f64) -> Result<RgbImage> {
    if !(0.0..=4.0).contains(&r) {
        return Err(Error::range(format!("blur width {r} outside [0, 4]")));
    }
    if r == 0.0 {
        return Ok(img.clone());
    }
    let taps = gaussian_taps(r);
    let (w, h) = (img.width() as usize, img.height() as usize);
    let src = img.as_raw();
    let mut horiz = vec![0.0f64; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let xs = reflect(x as isize + k as isize - RADIUS as isize, w);
                    acc += t * src[(y * w + xs) * 3 + c] as f64;
                }
                horiz[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let ys = reflect(y as isize + k as isize - RADIUS as isize, h);
                    acc += t * horiz[(ys * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, out).expect("buffer sized for image"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_width_is_identity() {
        let img = RgbImage::from_fn(9, 7, |x, y| image::Rgb([(x * 20) as u8, (y * 30) as u8, 7]));
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn constant_image_unchanged() {
        let img = RgbImage::from_pixel(30, 24, image::Rgb([91, 180, 3]));
        for r in [0.5, 2.0, 4.0] {
            assert_eq!(gaussian_blur(&img, r).unwrap(), img);
        }
    }

    #[test]
    fn impulse_center_matches_kernel_sum() {
        let mut img = RgbImage::new(41, 41);
        img.put_pixel(20, 20, image::Rgb([255, 255, 255]));
        let out = gaussian_blur(&img, 2.0).unwrap();
        // Brute-force 2-D kernel evaluation, independent of the separable path.
        let mut total = 0.0;
        for i in -10i32..=10 {
            for j in -10i32..=10 {
                total += (-((i * i + j * j) as f64) / 8.0).exp();
            }
        }
        let center = 1.0 / total;
        let expected = (255.0 * center).round() as u8;
        assert_eq!(out.get_pixel(20, 20)[0], expected);
        assert_eq!(expected, 10);
    }

    #[test]
    fn out_of_range_width_rejected() {
        let img = RgbImage::new(4, 4);
        assert!(gaussian_blur(&img, 4.5).is_err());
        assert!(gaussian_blur(&img, -0.1).is_err());
    }

    #[test]
    fn reflect_folds() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(-12, 3), 0);
        assert_eq!(reflect(7, 1), 0);
    }
}
