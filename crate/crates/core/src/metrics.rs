//! Full-reference fidelity metrics computed on packed Bayer planes.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{center_crop, normalize, PackedImage, ValueSpace};
use crate::stats::CompensatedSum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Dev,
    Final,
}

impl Phase {
    /// Side of the square center crop, in packed-plane pixels.
    pub fn crop_side(self) -> usize {
        match self {
            Phase::Dev => 512,
            Phase::Final => 1024,
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" => Ok(Phase::Dev),
            "final" => Ok(Phase::Final),
            other => Err(Error::Data(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, data_range: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// dB; `f64::INFINITY` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
    pub n_pixels: usize,
    /// `(width, height)` of each cropped plane.
    pub crop: (usize, usize),
}

fn check_dims(a: &PackedImage, b: &PackedImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs reference {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Mean squared error pooled over every channel and pixel.
pub fn mse(pred: &PackedImage, gt: &PackedImage) -> Result<f64> {
    check_dims(pred, gt)?;
    let mut acc = CompensatedSum::default();
    for (a, b) in pred.values().zip(gt.values()) {
        acc.add((a - b) * (a - b));
    }
    Ok(acc.value() / pred.pixel_count() as f64)
}

pub fn psnr(pred: &PackedImage, gt: &PackedImage, peak: f64) -> Result<f64> {
    if pred.space != gt.space {
        return Err(Error::Domain(format!(
            "value spaces differ: {} vs {}",
            pred.space.as_str(),
            gt.space.as_str()
        )));
    }
    let m = mse(pred, gt)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Separable valid-region filtering.
fn filter_valid(x: ArrayView2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let rows = Array2::from_shape_fn((h, ow), |(y, x0)| k.iter().enumerate().map(|(i, kv)| kv * x[[y, x0 + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y0, x0)| k.iter().enumerate().map(|(i, kv)| kv * rows[[y0 + i, x0]]).sum::<f64>())
}

/// Mean SSIM of one plane pair over the valid region.
pub fn ssim_plane(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &SsimConfig) -> Result<f64> {
    let (h, w) = a.dim();
    if b.dim() != (h, w) {
        return Err(Error::Dimension(format!("plane shapes differ: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if h < cfg.window || w < cfg.window {
        return Err(Error::Dimension(format!("plane {w}x{h} smaller than SSIM window {}", cfg.window)));
    }
    let k = gaussian_kernel(cfg.window, cfg.sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid((&a * &a).view(), &k);
    let bb = filter_valid((&b * &b).view(), &k);
    let ab = filter_valid((&a * &b).view(), &k);
    let mut acc = CompensatedSum::default();
    for ((((ma, mb), saa), sbb), sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc.add(num / den);
    }
    Ok(acc.value() / mu_a.len() as f64)
}

/// SSIM averaged over the four Bayer channels.
pub fn ssim(pred: &PackedImage, gt: &PackedImage, cfg: &SsimConfig) -> Result<f64> {
    check_dims(pred, gt)?;
    let per: Vec<f64> = (0..4)
        .into_par_iter()
        .map(|c| ssim_plane(pred.plane(c).view(), gt.plane(c).view(), cfg))
        .collect::<Result<_>>()?;
    Ok(((per[0] + per[1]) + (per[2] + per[3])) / 4.0)
}

fn to_normalized(img: &PackedImage) -> Result<PackedImage> {
    match img.space {
        ValueSpace::Normalized => Ok(img.clone()),
        _ => normalize(img, 1.0),
    }
}

/// Normalize, center-crop to the phase size and score a prediction.
pub fn evaluate_pair(pred: &PackedImage, gt: &PackedImage, phase: Phase) -> Result<EvalResult> {
    evaluate_pair_with(pred, gt, phase.crop_side(), &SsimConfig::default())
}

pub fn evaluate_pair_with(pred: &PackedImage, gt: &PackedImage, side: usize, cfg: &SsimConfig) -> Result<EvalResult> {
    if pred.meta.camera_id != gt.meta.camera_id || pred.meta.iso != gt.meta.iso {
        log::warn!(
            "metadata mismatch: prediction {}@{} vs reference {}@{}",
            pred.meta.camera_id,
            pred.meta.iso,
            gt.meta.camera_id,
            gt.meta.iso
        );
    }
    check_dims(pred, gt)?;
    let p = center_crop(&to_normalized(pred)?, side, side)?;
    let g = center_crop(&to_normalized(gt)?, side, side)?;
    Ok(EvalResult {
        psnr: psnr(&p, &g, 1.0)?,
        ssim: ssim(&p, &g, cfg)?,
        n_pixels: p.pixel_count(),
        crop: (side, side),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raw::FrameMeta;
    use proptest::prelude::*;

    fn meta() -> FrameMeta {
        FrameMeta::new("cam", 800, 0.0, 1.0)
    }

    fn img(f: impl Fn(usize, usize, usize) -> f64, w: usize, h: usize) -> PackedImage {
        let planes = std::array::from_fn(|c| Array2::from_shape_fn((h, w), |(y, x)| f(c, y, x)));
        PackedImage::new(planes, ValueSpace::Normalized, 1.0, meta()).unwrap()
    }

    /// Direct 2-D windowed moments, no separability.
    fn ssim_brute(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = 11;
        let c = 5.0;
        let mut wts = vec![vec![0.0; n]; n];
        let mut total = 0.0;
        for (i, row) in wts.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / 4.5).exp();
                total += *v;
            }
        }
        let (h, w) = a.dim();
        let (c1, c2) = (1e-4, 9e-4);
        let mut sum = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let wv = wts[i][j] / total;
                        let (p, q) = (a[[y0 + i, x0 + j]], b[[y0 + i, x0 + j]]);
                        ma += wv * p;
                        mb += wv * q;
                        saa += wv * p * p;
                        sbb += wv * q * q;
                        sab += wv * p * q;
                    }
                }
                let (va, vb, cv) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        sum / count
    }

    #[test]
    fn psnr_examples() {
        let gt = img(|c, y, x| 0.1 + 0.01 * ((c + y + x) % 7) as f64, 8, 8);
        assert_eq!(psnr(&gt, &gt, 1.0).unwrap(), f64::INFINITY);
        let shifted = img(|c, y, x| 0.1 + 0.01 * ((c + y + x) % 7) as f64 + 0.1, 8, 8);
        assert!((psnr(&shifted, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let half = img(|c, y, x| 0.1 + 0.01 * ((c + y + x) % 7) as f64 + if x < 4 { 0.2 } else { 0.0 }, 8, 8);
        let want = 10.0 * (1.0f64 / 0.02).log10();
        assert!((psnr(&half, &gt, 1.0).unwrap() - want).abs() < 1e-9);
        assert!((want - 16.9897).abs() < 1e-4);
        let small = img(|_, _, _| 0.0, 4, 8);
        assert!(matches!(psnr(&small, &gt, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = img(|c, y, x| ((c * 31 + y * 7 + x * 13) % 17) as f64 / 17.0, 16, 16);
        assert_eq!(ssim(&a, &a, &SsimConfig::default()).unwrap(), 1.0);
        let p = img(|_, _, _| 0.5, 16, 16);
        let q = img(|_, _, _| 0.6, 16, 16);
        let want = (2.0 * 0.5 * 0.6 + 1e-4) / (0.25 + 0.36 + 1e-4);
        let got = ssim(&p, &q, &SsimConfig::default()).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 0.98361).abs() < 1e-5);
    }

    #[test]
    fn ssim_anti_correlated_texture() {
        let gt = img(|_, y, x| if (x + y) % 2 == 0 { 0.6 } else { 0.4 }, 16, 16);
        let pred = img(|_, y, x| 1.0 - if (x + y) % 2 == 0 { 0.6 } else { 0.4 }, 16, 16);
        let got = ssim(&pred, &gt, &SsimConfig::default()).unwrap();
        let brute = ssim_brute(pred.plane(0), gt.plane(0));
        assert!((got - brute).abs() < 1e-12);
        assert!(got < 0.0, "{got}");
    }

    #[test]
    fn ssim_window_too_large() {
        let a = img(|_, _, _| 0.5, 10, 16);
        assert!(matches!(ssim(&a, &a, &SsimConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn evaluate_crops_dev_phase() {
        let gt = img(|c, y, x| ((c + 3 * y + 5 * x) % 11) as f64 / 11.0, 600, 520);
        let r = evaluate_pair(&gt, &gt, Phase::Dev).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert_eq!(r.ssim, 1.0);
        assert_eq!(r.n_pixels, 4 * 512 * 512);
        assert_eq!(r.crop, (512, 512));
        assert!(matches!(evaluate_pair(&gt, &gt, Phase::Final), Err(Error::Dimension(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn ssim_symmetric_and_matches_brute(vals in proptest::collection::vec(0.0f64..1.0, 2 * 4 * 14 * 13)) {
            let n = 14 * 13;
            let a = img(|c, y, x| vals[c * n + y * 13 + x], 13, 14);
            let b = img(|c, y, x| vals[4 * n + c * n + y * 13 + x], 13, 14);
            let cfg = SsimConfig::default();
            let ab = ssim(&a, &b, &cfg).unwrap();
            let ba = ssim(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab <= 1.0);
            let brute: f64 = (0..4).map(|c| ssim_brute(a.plane(c), b.plane(c))).sum::<f64>() / 4.0;
            prop_assert!((ab - brute).abs() < 1e-10);
        }

        #[test]
        fn constant_offset_lowers_psnr(d in 1e-6f64..0.5) {
            let a = img(|c, y, x| ((c + y + x) % 5) as f64 / 10.0, 8, 8);
            let b = img(|c, y, x| ((c + y + x) % 5) as f64 / 10.0 + d, 8, 8);
            prop_assert!(psnr(&b, &a, 1.0).unwrap().is_finite());
        }
    }
}
