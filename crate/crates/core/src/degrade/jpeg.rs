//! JPEG compression surrogate: 8x8 block DCT with Annex K quantization,
//! no chroma subsampling and no entropy coding.

use std::sync::OnceLock;

use image::RgbImage;

use crate::error::{Error, Result};

#[rustfmt::skip]
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
pub const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quantization tables after quality scaling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

impl QuantTables {
    /// libjpeg-style scaling; `quality` is rounded to the nearest integer.
    pub fn for_quality(quality: f64) -> Result<Self> {
        if !(10.0..=100.0).contains(&quality) {
            return Err(Error::range(format!("jpeg quality {quality} outside [10, 100]")));
        }
        let q = quality.round() as u32;
        let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
        let scaled = |base: &[u16; 64]| {
            let mut t = [0u16; 64];
            for (o, &b) in t.iter_mut().zip(base) {
                *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
            }
            t
        };
        Ok(QuantTables {
            luma: scaled(&LUMA_TABLE),
            chroma: scaled(&CHROMA_TABLE),
        })
    }

    pub fn ones() -> Self {
        QuantTables {
            luma: [1; 64],
            chroma: [1; 64],
        }
    }
}

/// Orthonormal DCT-II basis, `basis[u][x]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (0.5f64).sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
            }
        }
        b
    })
}

pub fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let a = dct_basis();
    let mut tmp = [0.0; 64];
    // rows: tmp[y][u] = sum_x a[u][x] * f[y][x]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| a[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| a[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let a = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| a[v][y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| a[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn rgb_to_ycbcr(r: f64, g: f64, b: f64) -> [f64; 3] {
    [
        0.299 * r + 0.587 * g + 0.114 * b,
        128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b,
        128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b,
    ]
}

fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    [
        y + 1.402 * (cr - 128.0),
        y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0),
        y + 1.772 * (cb - 128.0),
    ]
}

/// Compresses and decompresses with the given quality, or returns the input
/// unchanged for `None`.
pub fn jpeg_degrade(img: &RgbImage, quality: Option<f64>) -> Result<RgbImage> {
    match quality {
        None => Ok(img.clone()),
        Some(q) => jpeg_with_tables(img, &QuantTables::for_quality(q)?),
    }
}

/// Block-DCT round trip with explicit quantization tables. Edges are padded
/// by replication up to a multiple of 8 and cropped afterwards.
pub fn jpeg_with_tables(img: &RgbImage, tables: &QuantTables) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (pw, ph) = (w.div_ceil(8) * 8, h.div_ceil(8) * 8);
    let mut planes = vec![vec![0.0f64; pw * ph]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let p = img.get_pixel(x.min(w - 1) as u32, y.min(h - 1) as u32);
            let ycc = rgb_to_ycbcr(p[0] as f64, p[1] as f64, p[2] as f64);
            for c in 0..3 {
                planes[c][y * pw + x] = ycc[c];
            }
        }
    }
    for (c, plane) in planes.iter_mut().enumerate() {
        let table = if c == 0 { &tables.luma } else { &tables.chroma };
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        block[i * 8 + j] = plane[(by + i) * pw + bx + j] - 128.0;
                    }
                }
                let mut coef = fdct(&block);
                for (k, cv) in coef.iter_mut().enumerate() {
                    let qv = table[k] as f64;
                    *cv = (*cv / qv).round() * qv;
                }
                let rec = idct(&coef);
                for i in 0..8 {
                    for j in 0..8 {
                        plane[(by + i) * pw + bx + j] = rec[i * 8 + j] + 128.0;
                    }
                }
            }
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let i = y as usize * pw + x as usize;
        let rgb = ycbcr_to_rgb(planes[0][i], planes[1][i], planes[2][i]);
        for c in 0..3 {
            px[c] = rgb[c].round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn none_is_identity() {
        let img = RgbImage::from_fn(13, 9, |x, y| image::Rgb([(x * 19) as u8, (y * 27) as u8, 40]));
        assert_eq!(jpeg_degrade(&img, None).unwrap(), img);
    }

    #[test]
    fn uniform_gray_survives_quality_100() {
        for v in [0u8, 37, 128, 200, 255] {
            let img = RgbImage::from_pixel(16, 24, image::Rgb([v, v, v]));
            assert_eq!(jpeg_degrade(&img, Some(100.0)).unwrap(), img);
        }
    }

    #[test]
    fn dc_only_block_brute_force() {
        // A constant 8x8 block: brute-force DCT has DC = 8 * (v - 128) and zero AC.
        let block = [77.0 - 128.0; 64];
        let coef = fdct(&block);
        assert!((coef[0] - 8.0 * (77.0 - 128.0)).abs() < 1e-9);
        assert!(coef[1..].iter().all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn dct_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block: [f64; 64] = std::array::from_fn(|_| rng.random_range(-128.0..128.0));
        let coef = fdct(&block);
        let e_space: f64 = block.iter().map(|v| v * v).sum();
        let e_freq: f64 = coef.iter().map(|v| v * v).sum();
        assert!((e_space - e_freq).abs() < 1e-6 * e_space);
        let back = idct(&coef);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_tables_round_trip_within_one() {
        // Gray content keeps chroma exact; color conversion would amplify the
        // coefficient rounding on saturated pixels.
        for rgb in crate::degrade::procedural_corpus(8, 9) {
            let img = RgbImage::from_fn(rgb.width(), rgb.height(), |x, y| {
                let p = rgb.get_pixel(x, y);
                let l = ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114) / 1000) as u8;
                image::Rgb([l, l, l])
            });
            let out = jpeg_with_tables(&img, &QuantTables::ones()).unwrap();
            let worst = img
                .iter()
                .zip(out.iter())
                .map(|(&a, &b)| (a as i32 - b as i32).abs())
                .max()
                .unwrap();
            assert!(worst <= 1, "max deviation {worst}");
        }
    }

    #[test]
    fn table_scaling_matches_libjpeg() {
        let t = QuantTables::for_quality(50.0).unwrap();
        assert_eq!(t.luma, LUMA_TABLE);
        let t = QuantTables::for_quality(10.0).unwrap();
        // scale 500: 16 * 5 = 80
        assert_eq!(t.luma[0], 80);
        assert_eq!(t.chroma[63], 255);
        assert_eq!(QuantTables::for_quality(100.0).unwrap(), QuantTables::ones());
        assert!(QuantTables::for_quality(5.0).is_err());
    }

    #[test]
    fn lower_quality_degrades_more() {
        let img = RgbImage::from_fn(32, 32, |x, y| {
            image::Rgb([((x * 8) ^ (y * 5)) as u8, (x * y) as u8, ((x + y) * 4) as u8])
        });
        let err = |q: f64| -> f64 {
            let out = jpeg_degrade(&img, Some(q)).unwrap();
            img.iter()
                .zip(out.iter())
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum()
        };
        assert!(err(10.0) > err(60.0));
        assert!(err(60.0) > err(95.0));
    }
}
