//! Image distortion metrics: MSE/PSNR, SSIM, MS-SSIM, plus a plug-in hook
//! for external perceptual metrics.
//!
//! PSNR and (MS-)SSIM operate on the integer-remapped `[0, 255]` domain
//! (round, clamp), matching how decoder outputs are evaluated; plug-ins
//! receive the raw `[-1, 1]` tensors.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::denormalize;
use crate::error::{Error, Result};
use crate::signal::SourceImage;

const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Standard five-scale weighting used by the multi-scale metric.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// 11-tap Gaussian window, sigma 1.5.
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

/// Minimum side length for five dyadic scales: 11 * 2^4.
pub const MS_SSIM_MIN_SIDE: usize = 176;

/// Remaps a `[-1, 1]` image to rounded, clamped `[0, 255]` intensities.
pub fn to_intensity(img: &SourceImage) -> Array3<f64> {
    denormalize(img).mapv(|v| v as f64)
}

fn check_shapes(a: &SourceImage, b: &SourceImage) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "metric inputs have mismatched shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on the remapped integer domain:
/// `10 log10(255^2 / MSE)` with the MSE over all elements. Identical images
/// return the `+inf` sentinel.
pub fn psnr(reference: &SourceImage, distorted: &SourceImage) -> Result<f64> {
    check_shapes(reference, distorted)?;
    let a = to_intensity(reference);
    let b = to_intensity(distorted);
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (WINDOW / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode Gaussian filtering of a single plane.
fn filter_valid(plane: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let k = taps.len();
    let oh = h - k + 1;
    let ow = w - k + 1;
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * plane[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

struct SsimMaps {
    /// Luminance * contrast-structure per window.
    full_mean: f64,
    /// Contrast-structure only per window.
    cs_mean: f64,
}

fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, taps: &[f64]) -> SsimMaps {
    let mu_a = filter_valid(a, taps);
    let mu_b = filter_valid(b, taps);
    let aa = filter_valid(&(a * a), taps);
    let bb = filter_valid(&(b * b), taps);
    let ab = filter_valid(&(a * b), taps);
    let mut full_sum = 0.0;
    let mut cs_sum = 0.0;
    let count = mu_a.len() as f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice().unwrap()[i], mu_b.as_slice().unwrap()[i]);
        let va = aa.as_slice().unwrap()[i] - ma * ma;
        let vb = bb.as_slice().unwrap()[i] - mb * mb;
        let cov = ab.as_slice().unwrap()[i] - ma * mb;
        let lum = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        full_sum += lum * cs;
        cs_sum += cs;
    }
    SsimMaps {
        full_mean: full_sum / count,
        cs_mean: cs_sum / count,
    }
}

fn planes(img: &Array3<f64>) -> Vec<Array2<f64>> {
    (0..img.dim().0)
        .map(|c| img.index_axis(ndarray::Axis(0), c).to_owned())
        .collect()
}

/// Structural similarity with the standard 11x11 Gaussian window (sigma 1.5)
/// and constants `C1 = (0.01*255)^2`, `C2 = (0.03*255)^2`, computed per
/// channel on the remapped integer domain and averaged.
pub fn ssim(reference: &SourceImage, distorted: &SourceImage) -> Result<f64> {
    check_shapes(reference, distorted)?;
    let (_, h, w) = reference.shape();
    if h < WINDOW || w < WINDOW {
        return Err(Error::Config(format!(
            "image {h}x{w} is smaller than the {WINDOW}x{WINDOW} analysis window"
        )));
    }
    let taps = gaussian_window();
    let a = to_intensity(reference);
    let b = to_intensity(distorted);
    let mut total = 0.0;
    let channel_count = a.dim().0 as f64;
    for (pa, pb) in planes(&a).iter().zip(planes(&b).iter()) {
        total += ssim_plane(pa, pb, &taps).full_mean;
    }
    Ok(total / channel_count)
}

fn halve(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = 0.25
                * (plane[[2 * y, 2 * x]]
                    + plane[[2 * y + 1, 2 * x]]
                    + plane[[2 * y, 2 * x + 1]]
                    + plane[[2 * y + 1, 2 * x + 1]]);
        }
    }
    out
}

/// Multi-scale SSIM over five dyadic scales: contrast/structure terms at
/// every scale, luminance only at the coarsest, combined with the standard
/// exponents. Negative contrast terms are clamped at zero, keeping the score
/// at most 1.
pub fn ms_ssim(reference: &SourceImage, distorted: &SourceImage) -> Result<f64> {
    check_shapes(reference, distorted)?;
    let (_, h, w) = reference.shape();
    if h < MS_SSIM_MIN_SIDE || w < MS_SSIM_MIN_SIDE {
        return Err(Error::Config(format!(
            "image {h}x{w} is too small for five dyadic scales; both sides must be at least {MS_SSIM_MIN_SIDE}"
        )));
    }
    let taps = gaussian_window();
    let a = to_intensity(reference);
    let b = to_intensity(distorted);
    let channel_count = a.dim().0 as f64;
    let mut total = 0.0;
    for (pa, pb) in planes(&a).into_iter().zip(planes(&b)) {
        let mut pa = pa;
        let mut pb = pb;
        let mut score = 1.0;
        for (scale, weight) in MS_WEIGHTS.iter().enumerate() {
            let maps = ssim_plane(&pa, &pb, &taps);
            let factor = if scale + 1 == MS_WEIGHTS.len() {
                maps.full_mean
            } else {
                maps.cs_mean
            };
            score *= factor.max(0.0).powf(*weight);
            if scale + 1 < MS_WEIGHTS.len() {
                pa = halve(&pa);
                pb = halve(&pb);
            }
        }
        total += score;
    }
    Ok(total / channel_count)
}

/// Scores collected for one image pair. PSNR may be the `+inf` sentinel;
/// aggregation layers decide how to cap it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    /// Plug-in name -> score; a failed plug-in leaves `None` in its slot.
    pub plugin_scores: BTreeMap<String, Option<f64>>,
}

type PluginFn = Box<dyn Fn(&SourceImage, &SourceImage) -> Result<f64> + Send + Sync>;

/// Registry of external perceptual metrics. Plug-ins receive the raw
/// `[-1, 1]` tensors; a plug-in failure is isolated to its own score slot.
#[derive(Default)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, PluginFn>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, plugin: F)
    where
        F: Fn(&SourceImage, &SourceImage) -> Result<f64> + Send + Sync + 'static,
    {
        self.plugins.insert(name.to_string(), Box::new(plugin));
    }

    pub fn names(&self) -> Vec<String> {
        self.plugins.keys().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    pub fn evaluate(
        &self,
        reference: &SourceImage,
        distorted: &SourceImage,
    ) -> BTreeMap<String, Option<f64>> {
        self.plugins
            .iter()
            .map(|(name, plugin)| (name.clone(), plugin(reference, distorted).ok()))
            .collect()
    }
}

/// Full report: PSNR, SSIM, MS-SSIM when the image is large enough, and all
/// registered plug-in scores.
pub fn evaluate(
    reference: &SourceImage,
    distorted: &SourceImage,
    plugins: &PluginRegistry,
) -> Result<MetricReport> {
    let (_, h, w) = reference.shape();
    let ms = if h >= MS_SSIM_MIN_SIDE && w >= MS_SSIM_MIN_SIDE {
        Some(ms_ssim(reference, distorted)?)
    } else {
        None
    };
    Ok(MetricReport {
        psnr_db: psnr(reference, distorted)?,
        ssim: ssim(reference, distorted)?,
        ms_ssim: ms,
        plugin_scores: plugins.evaluate(reference, distorted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::substream;
    use crate::data::normalize;
    use ndarray::Array3;
    use rand::Rng;

    fn const_image(shape: (usize, usize, usize), value: f64) -> SourceImage {
        SourceImage::new(Array3::from_elem(shape, value))
    }

    fn int_image(shape: (usize, usize, usize), level: u8) -> SourceImage {
        normalize(&Array3::from_elem(shape, level))
    }

    #[test]
    fn psnr_reference_points() {
        let a = int_image((3, 8, 8), 100);
        // Identical: +inf sentinel.
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // All-black vs all-white: MSE = 255^2 so 0 dB.
        let black = const_image((3, 8, 8), -1.0);
        let white = const_image((3, 8, 8), 1.0);
        assert!((psnr(&black, &white).unwrap()).abs() < 1e-12);
        // Uniform one-level error: 20 log10(255).
        let b = int_image((3, 8, 8), 101);
        let expected = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-3);
    }

    #[test]
    fn psnr_is_permutation_invariant() {
        let mut rng = substream(9, &[1]);
        let a = SourceImage::new(Array3::from_shape_simple_fn((1, 4, 4), || {
            rng.random_range(-1.0..1.0)
        }));
        let b = SourceImage::new(Array3::from_shape_simple_fn((1, 4, 4), || {
            rng.random_range(-1.0..1.0)
        }));
        let base = psnr(&a, &b).unwrap();
        // Reverse both images identically.
        let rev = |img: &SourceImage| {
            let mut flat: Vec<f64> = img.data.iter().copied().collect();
            flat.reverse();
            SourceImage::new(Array3::from_shape_vec((1, 4, 4), flat).unwrap())
        };
        let permuted = psnr(&rev(&a), &rev(&b)).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_growing_noise() {
        let mut rng = substream(10, &[2]);
        let clean = SourceImage::new(Array3::from_shape_simple_fn((3, 16, 16), || {
            rng.random_range(-0.5..0.5)
        }));
        let mut last = f64::INFINITY;
        for (i, sigma) in [0.02, 0.05, 0.1, 0.2, 0.4].iter().enumerate() {
            // Average over draws to get a stable monotone trend.
            let mut acc = 0.0;
            for trial in 0..20 {
                let mut rng = substream(11, &[i as u64, trial]);
                let noisy = SourceImage::new(clean.data.mapv(|v| {
                    v + sigma
                        * <rand_distr::StandardNormal as rand_distr::Distribution<f64>>::sample(
                            &rand_distr::StandardNormal,
                            &mut rng,
                        )
                }));
                acc += psnr(&clean, &noisy).unwrap();
            }
            let mean = acc / 20.0;
            assert!(mean < last, "psnr should fall as sigma grows");
            last = mean;
        }
    }

    #[test]
    fn ssim_self_similarity_and_symmetry() {
        let mut rng = substream(12, &[3]);
        let a = SourceImage::new(Array3::from_shape_simple_fn((3, 16, 16), || {
            rng.random_range(-1.0..1.0)
        }));
        let b = SourceImage::new(Array3::from_shape_simple_fn((3, 16, 16), || {
            rng.random_range(-1.0..1.0)
        }));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        // Zero variance everywhere: value reduces to the luminance term.
        let a = int_image((1, 16, 16), 80);
        let b = int_image((1, 16, 16), 120);
        let (m1, m2) = (80.0, 120.0);
        let expected = (2.0 * m1 * m2 + C1) / (m1 * m1 + m2 * m2 + C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = const_image((1, 8, 8), 0.0);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn ms_ssim_contract() {
        let mut rng = substream(13, &[4]);
        let a = SourceImage::new(Array3::from_shape_simple_fn((1, 192, 192), || {
            rng.random_range(-1.0..1.0)
        }));
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        // Bounded above by 1 for arbitrary pairs.
        for trial in 0..3 {
            let mut rng = substream(14, &[trial]);
            let x = SourceImage::new(Array3::from_shape_simple_fn((1, 192, 192), || {
                rng.random_range(-1.0..1.0)
            }));
            let y = SourceImage::new(Array3::from_shape_simple_fn((1, 192, 192), || {
                rng.random_range(-1.0..1.0)
            }));
            let v = ms_ssim(&x, &y).unwrap();
            assert!(v <= 1.0 + 1e-12, "ms_ssim {v} exceeded 1");
            let sym = ms_ssim(&y, &x).unwrap();
            assert!((v - sym).abs() < 1e-12);
        }
        // Too-small image names the minimum size.
        let small = const_image((1, 64, 64), 0.1);
        let err = match ms_ssim(&small, &small) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("64x64 must be rejected"),
        };
        assert!(err.contains("176"), "error should name the minimum: {err}");
    }

    #[test]
    fn plugins_are_isolated_and_optional() {
        let a = const_image((1, 16, 16), 0.2);
        let b = const_image((1, 16, 16), 0.3);
        // No plugins registered: empty map.
        let empty = PluginRegistry::new();
        let report = evaluate(&a, &b, &empty).unwrap();
        assert!(report.plugin_scores.is_empty());
        // Constant-zero plugin is recorded under its name; a failing plugin
        // leaves a missing marker without disturbing the rest.
        let mut reg = PluginRegistry::new();
        reg.register("zero", |_, _| Ok(0.0));
        reg.register("broken", |_, _| {
            Err(Error::Numeric("plugin exploded".to_string()))
        });
        let report = evaluate(&a, &b, &reg).unwrap();
        assert_eq!(report.plugin_scores["zero"], Some(0.0));
        assert_eq!(report.plugin_scores["broken"], None);
        assert!(report.psnr_db.is_finite());
    }
}
