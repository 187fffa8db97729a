//! Clean-image sources and the JSON-lines sample manifest.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Provenance;
use crate::error::{Error, Result};
use crate::task::TaskVector;

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
        rng.random_range(0.0..255.0),
    ]
}

fn to_px(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

/// Deterministic synthetic clean images: gradients, checkerboards, Gaussian
/// blobs and ring patterns, with even sides between 64 and 128.
pub fn procedural_corpus(count: usize, seed: u64) -> Vec<RgbImage> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            let w = 2 * rng.random_range(32u32..=64);
            let h = 2 * rng.random_range(32u32..=64);
            match i % 4 {
                0 => gradient(w, h, &mut rng),
                1 => checkerboard(w, h, &mut rng),
                2 => blobs(w, h, &mut rng),
                _ => rings(w, h, &mut rng),
            }
        })
        .collect()
}

fn gradient(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let (a, b) = (random_color(rng), random_color(rng));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let span = (w as f64 * dx.abs() + h as f64 * dy.abs()).max(1.0);
    RgbImage::from_fn(w, h, |x, y| {
        let p = (x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy;
        to_px(lerp(a, b, (p / span + 0.5).clamp(0.0, 1.0)))
    })
}

fn checkerboard(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let (a, b) = (random_color(rng), random_color(rng));
    let cell = rng.random_range(4u32..=16);
    RgbImage::from_fn(w, h, |x, y| {
        if ((x / cell) + (y / cell)) % 2 == 0 {
            to_px(a)
        } else {
            to_px(b)
        }
    })
}

fn blobs(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let bg = random_color(rng);
    let n = rng.random_range(3..8);
    let spots: Vec<(f64, f64, f64, [f64; 3])> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
                rng.random_range(4.0..20.0),
                random_color(rng),
            )
        })
        .collect();
    RgbImage::from_fn(w, h, |x, y| {
        let mut c = bg;
        for &(cx, cy, s, col) in &spots {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            c = lerp(c, col, (-d2 / (2.0 * s * s)).exp());
        }
        to_px(c)
    })
}

fn rings(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let (a, b) = (random_color(rng), random_color(rng));
    let freq = rng.random_range(0.1..0.5);
    let (cx, cy) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    RgbImage::from_fn(w, h, |x, y| {
        let r = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        to_px(lerp(a, b, 0.5 + 0.5 * (r * freq).sin()))
    })
}

/// Loads every `*.png` in `dir` (sorted by file name) as 8-bit RGB.
pub fn load_png_dir(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let img = image::open(&p)
                .map_err(|source| Error::Image {
                    path: p.clone(),
                    source,
                })?
                .to_rgb8();
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, img))
        })
        .collect()
}

/// Crops a `size x size` patch (or the whole image, if smaller) at `(x, y)`.
pub fn crop(img: &RgbImage, x: u32, y: u32, size: u32) -> RgbImage {
    let w = size.min(img.width());
    let h = size.min(img.height());
    image::imageops::crop_imm(img, x.min(img.width() - w), y.min(img.height() - h), w, h).to_image()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub task: TaskVector,
    #[serde(flatten)]
    pub provenance: Provenance,
}

pub fn write_manifest<W: Write>(out: &mut W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("writing manifest", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_even() {
        let a = procedural_corpus(8, 3);
        let b = procedural_corpus(8, 3);
        assert_eq!(a, b);
        for img in &a {
            assert_eq!(img.width() % 2, 0);
            assert_eq!(img.height() % 2, 0);
            assert!((64..=128).contains(&img.width()));
        }
        assert_ne!(procedural_corpus(1, 4)[0], a[0]);
    }

    #[test]
    fn png_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = procedural_corpus(2, 1);
        for (i, img) in imgs.iter().enumerate() {
            img.save(dir.path().join(format!("{i:02}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let loaded = load_png_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].0, "01");
        assert_eq!(loaded[1].1, imgs[1]);
    }

    #[test]
    fn manifest_lines_parse_back() {
        let rec = ManifestRecord {
            file: "a.png".into(),
            task: TaskVector([0.4, 0.0, 0.0]),
            provenance: Provenance {
                source_id: 3,
                l_in: super::super::LevelVector([0.6, 0.0, 0.0]),
                l_gt: super::super::LevelVector([0.2, 0.0, 0.0]),
                seed: 9,
                strategy: super::super::Strategy::SingleUniform,
            },
        };
        let mut buf = Vec::new();
        write_manifest(&mut buf, &[rec.clone(), rec.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: ManifestRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back, rec);
    }
}
