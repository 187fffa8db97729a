//! Image-quality metrics and the 27-effect grid evaluation.

use image::RgbImage;
use serde::{Deserialize, Serialize, Serializer};

use crate::degrade::{degrade, params_to_level, ActiveTypes, DegradationParams};
use crate::error::{Error, Result};
use crate::extract::ModulationModel;
use crate::imageconv::{image_to_tensor, tensor_to_image};
use crate::task::TaskVector;

/// PSNR values above this are shown as this value.
pub const PSNR_DISPLAY_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::dim(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)` over all channels; `+inf` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.as_raw().len();
    if n == 0 {
        return Err(Error::dim("empty image"));
    }
    let se: u64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = x.abs_diff(y) as u64;
            d * d
        })
        .sum();
    if se == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = se as f64 / n as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub fn display_psnr(v: f64) -> f64 {
    v.min(PSNR_DISPLAY_CAP)
}

fn luma(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = k.iter().enumerate().map(|(i, &kv)| kv * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = k.iter().enumerate().map(|(i, &kv)| kv * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let k = gaussian_window();
    let (ya, yb) = (luma(a), luma(b));
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&ya, w, h, &k);
    let mu_b = filter_valid(&yb, w, h, &k);
    let saa = filter_valid(&prod(&ya, &ya), w, h, &k);
    let sbb = filter_valid(&prod(&yb, &yb), w, h, &k);
    let sab = filter_valid(&prod(&ya, &yb), w, h, &k);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}

/// One grid point: a physical degradation and the matching effect vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub params: DegradationParams,
    pub task: TaskVector,
}

/// The 27 effects from per-type settings r in {0,2,4}, sigma in {0,25,50}
/// and q in {none,60,10}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub points: Vec<GridPoint>,
}

impl EvalGrid {
    pub fn standard() -> Self {
        let mut points = Vec::with_capacity(27);
        for r in [0.0, 2.0, 4.0] {
            for sigma in [0.0, 25.0, 50.0] {
                for q in [None, Some(60.0), Some(10.0)] {
                    let params = DegradationParams { r, sigma, q };
                    let level = params_to_level(&params).expect("grid parameters are valid");
                    points.push(GridPoint {
                        params,
                        task: TaskVector(level.0),
                    });
                }
            }
        }
        EvalGrid { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tasks(&self) -> Vec<TaskVector> {
        self.points.iter().map(|p| p.task).collect()
    }

    /// Degradations to score against: every grid point except the clean
    /// starting point, restricted to the active types.
    pub fn test_degradations(&self, active: ActiveTypes) -> Vec<DegradationParams> {
        self.points
            .iter()
            .map(|p| p.params)
            .filter(|p| *p != DegradationParams::CLEAN)
            .filter(|p| {
                (active.0[0] || p.r == 0.0) && (active.0[1] || p.sigma == 0.0) && (active.0[2] || p.q.is_none())
            })
            .collect()
    }
}

/// A degraded image with its clean reference.
#[derive(Clone, Debug)]
pub struct TestImage {
    pub name: String,
    pub params: DegradationParams,
    pub degraded: RgbImage,
    pub clean: Option<RgbImage>,
}

/// Every clean image under every degradation; noise seeds derive from `seed`.
pub fn build_test_set(
    clean: &[(String, RgbImage)],
    degradations: &[DegradationParams],
    seed: u64,
) -> Result<Vec<TestImage>> {
    let mut out = Vec::with_capacity(clean.len() * degradations.len());
    for (i, (name, img)) in clean.iter().enumerate() {
        for (j, p) in degradations.iter().enumerate() {
            let noise_seed = seed ^ ((i as u64) << 32) ^ j as u64;
            out.push(TestImage {
                name: name.clone(),
                params: *p,
                degraded: degrade(img, p, noise_seed)?,
                clean: Some(img.clone()),
            });
        }
    }
    Ok(out)
}

/// Anything that can render a set of effects for one image.
pub trait EffectModel {
    fn apply(&self, img: &RgbImage, tasks: &[TaskVector]) -> Result<Vec<RgbImage>>;
}

/// Returns its input for every effect.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityModel;

impl EffectModel for IdentityModel {
    fn apply(&self, img: &RgbImage, tasks: &[TaskVector]) -> Result<Vec<RgbImage>> {
        Ok(vec![img.clone(); tasks.len()])
    }
}

impl EffectModel for ModulationModel {
    fn apply(&self, img: &RgbImage, tasks: &[TaskVector]) -> Result<Vec<RgbImage>> {
        let out = self.run(&image_to_tensor(img)?, tasks)?;
        out.images.iter().map(|t| tensor_to_image(t, 0)).collect()
    }
}

fn capped<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(display_psnr(*v))
}

fn capped_vec<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|&x| display_psnr(x)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScores {
    pub name: String,
    pub params: DegradationParams,
    /// Score of each grid effect, grid order.
    #[serde(serialize_with = "capped_vec")]
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    #[serde(serialize_with = "capped")]
    pub best_psnr: f64,
    pub best_ssim: f64,
    pub best_psnr_task: TaskVector,
    pub best_ssim_task: TaskVector,
    /// PSNR of the degraded input itself.
    #[serde(serialize_with = "capped")]
    pub input_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub grid: Vec<TaskVector>,
    pub images: Vec<ImageScores>,
    #[serde(serialize_with = "capped")]
    pub mean_best_psnr: f64,
    pub mean_best_ssim: f64,
    #[serde(serialize_with = "capped")]
    pub mean_input_psnr: f64,
}

/// Index of the largest value; the first wins ties.
fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Scores every grid effect on every test image against its reference.
pub fn eval_grid<M: EffectModel + ?Sized>(model: &M, grid: &EvalGrid, test: &[TestImage]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let tasks = grid.tasks();
    let mut images = Vec::with_capacity(test.len());
    for item in test {
        let clean = item
            .clean
            .as_ref()
            .ok_or_else(|| Error::Data(format!("test image {} has no clean reference", item.name)))?;
        same_dims(&item.degraded, clean)?;
        let outputs = model.apply(&item.degraded, &tasks)?;
        let psnrs = outputs.iter().map(|o| psnr(o, clean)).collect::<Result<Vec<_>>>()?;
        let ssims = outputs.iter().map(|o| ssim(o, clean)).collect::<Result<Vec<_>>>()?;
        let (bp, bs) = (argmax(&psnrs), argmax(&ssims));
        images.push(ImageScores {
            name: item.name.clone(),
            params: item.params,
            best_psnr: psnrs[bp],
            best_ssim: ssims[bs],
            best_psnr_task: tasks[bp],
            best_ssim_task: tasks[bs],
            input_psnr: psnr(&item.degraded, clean)?,
            psnr: psnrs,
            ssim: ssims,
        });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        grid: tasks,
        mean_best_psnr: images.iter().map(|s| s.best_psnr).sum::<f64>() / n,
        mean_best_ssim: images.iter().map(|s| s.best_ssim).sum::<f64>() / n,
        mean_input_psnr: images.iter().map(|s| s.input_psnr).sum::<f64>() / n,
        images,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text summary table.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<24} {:>18} {:>9} {:>10} {:>9}  best effect\n",
            "image", "degradation", "input dB", "best dB", "best SSIM"
        );
        for s in &self.images {
            let q = s.params.q.map_or("none".to_string(), |q| format!("{q:.0}"));
            let deg = format!("r{:.0} s{:.0} q{}", s.params.r, s.params.sigma, q);
            let t = s.best_psnr_task.0;
            out.push_str(&format!(
                "{:<24} {:>18} {:>9.2} {:>10.2} {:>9.4}  ({:.2},{:.2},{:.2})\n",
                s.name,
                deg,
                display_psnr(s.input_psnr),
                display_psnr(s.best_psnr),
                s.best_ssim,
                t[0],
                t[1],
                t[2]
            ));
        }
        out.push_str(&format!(
            "mean over {} images: input {:.2} dB, best {:.2} dB, best SSIM {:.4}\n",
            self.images.len(),
            display_psnr(self.mean_input_psnr),
            display_psnr(self.mean_best_psnr),
            self.mean_best_ssim
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn pattern(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = (64 + (x * 7 + y * 13) % 128) as u8;
            Rgb([v, v.wrapping_add(20), 255 - v])
        })
    }

    #[test]
    fn psnr_examples() {
        let a = pattern(16, 12);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(display_psnr(f64::INFINITY), 99.0);
        let b = RgbImage::from_fn(16, 12, |x, y| {
            let p = a.get_pixel(x, y);
            Rgb([p[0] + 16, p[1] + 16, p[2] - 16])
        });
        let want = 10.0 * (65025.0f64 / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &pattern(8, 8)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = pattern(24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = RgbImage::from_fn(24, 20, |x, y| {
            let p = a.get_pixel(x, y);
            Rgb([255 - p[0], 255 - p[1], 255 - p[2]])
        });
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        assert_eq!(ssim(&a, &inv).unwrap(), ssim(&inv, &a).unwrap());
        assert!(ssim(&pattern(10, 30), &pattern(10, 30)).is_err());
    }

    #[test]
    fn grid_protocol() {
        let g = EvalGrid::standard();
        assert_eq!(g.len(), 27);
        assert_eq!(g.points[0].task, TaskVector::ZERO);
        assert!((g.points[1].task.0[2] - 40.0 / 90.0).abs() < 1e-12);
        assert_eq!(g.test_degradations(ActiveTypes::ALL).len(), 26);
        let denoise = g.test_degradations(ActiveTypes::DENOISE);
        assert_eq!(denoise.len(), 2);
        assert!(denoise.iter().all(|p| p.r == 0.0 && p.q.is_none() && p.sigma > 0.0));
    }

    #[test]
    fn identity_best_is_input_psnr() {
        let clean = vec![("a".to_string(), pattern(24, 24))];
        let grid = EvalGrid::standard();
        let test = build_test_set(&clean, &grid.test_degradations(ActiveTypes::DENOISE), 1).unwrap();
        let report = eval_grid(&IdentityModel, &grid, &test).unwrap();
        for s in &report.images {
            assert_eq!(s.best_psnr, s.input_psnr);
            assert_eq!(s.best_psnr_task, TaskVector::ZERO);
        }
        let again = eval_grid(&IdentityModel, &grid, &test).unwrap();
        assert_eq!(report, again);
        assert!(report.to_json().unwrap().contains("mean_best_psnr"));
        let mut missing = test.clone();
        missing[0].clean = None;
        assert!(eval_grid(&IdentityModel, &grid, &missing).is_err());
    }
}
