//! Noisy/clean pair synthesis from clean normalized RGGB images and a
//! calibrated [`SensorProfile`].
//!
//! A clean image `x` is darkened by the digital gain into an electron count
//! `x * (white - black) / (dgain * K)`, shot noise is drawn, signal-independent
//! noise is added (parametric read/row/quantization noise, a real dark-frame
//! patch, or a per-image random choice between the two), and the result is
//! scaled back by the digital gain. The clean image is therefore the
//! brightness-aligned ground truth of the noisy one.
//!
//! Every random draw comes from a ChaCha stream derived from an explicit
//! seed, so results are reproducible and independent of thread count.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{BandAxis, NoiseParams, SensorProfile};
use crate::error::{Error, Result};
use crate::raw::{pack_rggb, FrameMeta, PackedImage, RawFrame, SampleType, ValueSpace};
use crate::stats::derive_seed;

/// Mean below which Poisson variates are drawn exactly.
pub const DEFAULT_POISSON_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    Parametric,
    DarkSample,
    Hybrid,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(SynthMode::Parametric),
            "dark_sample" | "dark-sample" => Ok(SynthMode::DarkSample),
            "hybrid" => Ok(SynthMode::Hybrid),
            other => Err(Error::Data(format!("unknown synthesis mode {other:?}"))),
        }
    }
}

/// Which noise sources are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseComponents {
    pub shot: bool,
    pub read: bool,
    pub row: bool,
    pub quant: bool,
    /// Per-frame Gaussian offset with std `NoiseParams::sigma_frame`.
    pub frame: bool,
    /// Add quantization dither on top of real dark patches.
    pub quant_with_dark: bool,
}

impl Default for NoiseComponents {
    fn default() -> Self {
        Self { shot: true, read: true, row: true, quant: true, frame: false, quant_with_dark: false }
    }
}

impl NoiseComponents {
    pub fn none() -> Self {
        Self { shot: false, read: false, row: false, quant: false, frame: false, quant_with_dark: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub iso: u32,
    pub dgain: f64,
    pub mode: SynthMode,
    /// Probability of using a real dark patch in hybrid mode.
    pub hybrid_rho: f64,
    pub clip_hi: f64,
    pub components: NoiseComponents,
    pub seed: u64,
    pub poisson_threshold: f64,
    pub band_axis: BandAxis,
}

impl SynthConfig {
    pub fn new(iso: u32, dgain: f64, mode: SynthMode, seed: u64) -> Self {
        Self {
            iso,
            dgain,
            mode,
            hybrid_rho: 0.5,
            clip_hi: 1.0,
            components: NoiseComponents::default(),
            seed,
            poisson_threshold: DEFAULT_POISSON_THRESHOLD,
            band_axis: BandAxis::Row,
        }
    }

    pub fn validate(&self, profile: &SensorProfile) -> Result<()> {
        if !(self.dgain > 0.0 && self.dgain.is_finite()) {
            return Err(Error::Domain(format!("digital gain must be positive, got {}", self.dgain)));
        }
        if !(0.0..=1.0).contains(&self.hybrid_rho) {
            return Err(Error::Domain(format!("hybrid_rho {} outside [0, 1]", self.hybrid_rho)));
        }
        if !(self.clip_hi > 0.0) {
            return Err(Error::Domain(format!("clip_hi must be positive, got {}", self.clip_hi)));
        }
        profile.params(self.iso)?;
        Ok(())
    }
}

/// Poisson variate with mean `lambda`: exact inversion below `threshold`,
/// rounded `N(lambda, lambda)` clipped at zero above it.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, threshold: f64, rng: &mut R) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    if lambda < threshold {
        let u: f64 = rng.random();
        let mut p = (-lambda).exp();
        let mut cdf = p;
        let mut k = 0u32;
        // The bound only matters when the CDF saturates below u in floating point.
        while u > cdf && k < 10_000 {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
        }
        k as f64
    } else {
        let z: f64 = StandardNormal.sample(rng);
        (lambda + lambda.sqrt() * z).round().max(0.0)
    }
}

/// Shot-noise signal in DN above black for a clean normalized image.
pub fn sample_shot<R: Rng + ?Sized>(
    clean: &PackedImage,
    meta: &FrameMeta,
    params: &NoiseParams,
    dgain: f64,
    poisson_threshold: f64,
    rng: &mut R,
) -> Result<PackedImage> {
    if clean.space != ValueSpace::Normalized {
        return Err(Error::Domain("shot noise expects a normalized clean image".into()));
    }
    if let Some(v) = clean.values().find(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("clean image has negative or NaN value {v}")));
    }
    params.validate()?;
    if !(dgain > 0.0) {
        return Err(Error::Domain(format!("digital gain must be positive, got {dgain}")));
    }
    let mut planes = clean.planes().clone();
    for (c, plane) in planes.iter_mut().enumerate() {
        let to_electrons = meta.range(c) / (dgain * params.k);
        for v in plane.iter_mut() {
            *v = sample_poisson(*v * to_electrons, poisson_threshold, rng) * params.k;
        }
    }
    PackedImage::new(planes, ValueSpace::DnAboveBlack, clean.clip_hi, meta.clone())
}

fn pack_residual(mosaic: Array2<f64>, meta: &FrameMeta) -> Result<PackedImage> {
    pack_rggb(&RawFrame::new(mosaic, SampleType::F32, ValueSpace::DnAboveBlack, meta.clone())?)
}

/// Draw parametric signal-independent noise for planes of `width x height`.
///
/// Read noise is per pixel, row noise is one offset per mosaic line along
/// `band_axis`, quantization noise is uniform on `[-q/2, q/2)` and the
/// optional frame offset is one value for the whole image.
pub fn sample_parametric_read<R: Rng + ?Sized>(
    meta: &FrameMeta,
    width: usize,
    height: usize,
    params: &NoiseParams,
    components: &NoiseComponents,
    band_axis: BandAxis,
    rng: &mut R,
) -> Result<PackedImage> {
    let (mh, mw) = (2 * height, 2 * width);
    let mut mosaic = Array2::<f64>::zeros((mh, mw));
    let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };

    if components.frame && params.sigma_frame > 0.0 {
        let offset = params.sigma_frame * gauss(rng);
        mosaic.mapv_inplace(|v| v + offset);
    }
    if components.row && params.sigma_row > 0.0 {
        match band_axis {
            BandAxis::Row => {
                for mut row in mosaic.rows_mut() {
                    let o = params.sigma_row * gauss(rng);
                    row.mapv_inplace(|v| v + o);
                }
            }
            BandAxis::Col => {
                for mut col in mosaic.columns_mut() {
                    let o = params.sigma_row * gauss(rng);
                    col.mapv_inplace(|v| v + o);
                }
            }
        }
    }
    if components.read && params.sigma_read > 0.0 {
        for v in mosaic.iter_mut() {
            *v += params.sigma_read * gauss(rng);
        }
    }
    if components.quant && params.quant_step > 0.0 {
        add_quant(&mut mosaic, params.quant_step, rng);
    }
    pack_residual(mosaic, meta)
}

fn add_quant<R: Rng + ?Sized>(mosaic: &mut Array2<f64>, step: f64, rng: &mut R) {
    for v in mosaic.iter_mut() {
        let u: f64 = rng.random();
        *v += step * (u - 0.5);
    }
}

/// Random even-aligned crop of a random dark residual from the library.
pub fn sample_dark_patch<R: Rng + ?Sized>(
    profile: &SensorProfile,
    iso: u32,
    width: usize,
    height: usize,
    rng: &mut R,
) -> Result<PackedImage> {
    let library = &profile.iso(iso)?.dark_library;
    if library.is_empty() {
        return Err(Error::Profile(format!("ISO {iso} has an empty dark library")));
    }
    let frame = &library[rng.random_range(0..library.len())];
    if width > frame.width() || height > frame.height() {
        return Err(Error::Dimension(format!(
            "dark patch {width}x{height} larger than library frames {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    // One plane pixel is one full CFA period, so plane offsets are even-aligned in the mosaic.
    let x0 = rng.random_range(0..=frame.width() - width);
    let y0 = rng.random_range(0..=frame.height() - height);
    frame.crop(x0, y0, width, height)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const SHOT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const SELECT_STREAM: u64 = 3;

/// Which noise source a synthesis run used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    Parametric,
    DarkPatch,
}

/// Synthesis without the final clip, for moment checks. Values are in the
/// normalized scale but may be negative or exceed `clip_hi`.
pub fn synthesize_preclip(
    clean: &PackedImage,
    profile: &SensorProfile,
    cfg: &SynthConfig,
) -> Result<(PackedImage, NoiseSource)> {
    cfg.validate(profile)?;
    if clean.space != ValueSpace::Normalized {
        return Err(Error::Domain("clean image must be normalized".into()));
    }
    let params = profile.params(cfg.iso)?;
    let meta = profile.meta(cfg.iso);
    let (w, h) = (clean.width(), clean.height());
    let comps = &cfg.components;

    let source = match cfg.mode {
        SynthMode::Parametric => NoiseSource::Parametric,
        SynthMode::DarkSample => NoiseSource::DarkPatch,
        SynthMode::Hybrid => {
            if stream(cfg.seed, SELECT_STREAM).random_bool(cfg.hybrid_rho) {
                NoiseSource::DarkPatch
            } else {
                NoiseSource::Parametric
            }
        }
    };

    let mut noise_rng = stream(cfg.seed, NOISE_STREAM);
    let noise = match source {
        NoiseSource::Parametric => {
            sample_parametric_read(&meta, w, h, params, comps, cfg.band_axis, &mut noise_rng)?
        }
        NoiseSource::DarkPatch => {
            let patch = sample_dark_patch(profile, cfg.iso, w, h, &mut noise_rng)?;
            if comps.quant_with_dark && params.quant_step > 0.0 {
                let mut mosaic = crate::raw::unpack_rggb(&patch)?.into_data();
                add_quant(&mut mosaic, params.quant_step, &mut noise_rng);
                pack_residual(mosaic, &meta)?
            } else {
                patch
            }
        }
    };

    let signal = if comps.shot {
        let mut shot_rng = stream(cfg.seed, SHOT_STREAM);
        Some(sample_shot(clean, &meta, params, cfg.dgain, cfg.poisson_threshold, &mut shot_rng)?)
    } else {
        None
    };

    let mut planes = clean.planes().clone();
    for (c, plane) in planes.iter_mut().enumerate() {
        let scale = cfg.dgain / meta.range(c);
        if let Some(sig) = &signal {
            ndarray::Zip::from(&mut *plane).and(sig.plane(c)).for_each(|v, &s| *v = scale * s);
        }
        ndarray::Zip::from(plane).and(noise.plane(c)).for_each(|v, &n| *v += scale * n);
    }
    Ok((PackedImage::new(planes, ValueSpace::Normalized, cfg.clip_hi, meta)?, source))
}

/// Synthesize a noisy normalized image from a clean one.
///
/// With shot noise disabled the clean image passes through unchanged, so a
/// run with every component off returns `clamp(clean, 0, clip_hi)` exactly.
pub fn synthesize_noisy(clean: &PackedImage, profile: &SensorProfile, cfg: &SynthConfig) -> Result<PackedImage> {
    let (mut img, _) = synthesize_preclip(clean, profile, cfg)?;
    let hi = cfg.clip_hi;
    for p in img.planes_mut() {
        p.mapv_inplace(|v| v.clamp(0.0, hi));
    }
    Ok(img)
}

/// How digital gains are drawn per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgainSpec {
    /// Uniform choice from a preset list.
    Set(Vec<f64>),
    /// Uniform on `[lo, hi]`.
    Range(f64, f64),
}

impl DgainSpec {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match self {
            DgainSpec::Set(v) if !v.is_empty() => Ok(v[rng.random_range(0..v.len())]),
            DgainSpec::Set(_) => Err(Error::Domain("empty digital gain set".into())),
            DgainSpec::Range(lo, hi) if *lo > 0.0 && lo <= hi => {
                Ok(if lo == hi { *lo } else { rng.random_range(*lo..=*hi) })
            }
            DgainSpec::Range(lo, hi) => Err(Error::Domain(format!("invalid digital gain range {lo}:{hi}"))),
        }
    }
}

/// Per-patch synthesis settings for batch generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSampler {
    pub iso_set: Vec<u32>,
    pub dgain: DgainSpec,
    pub mode: SynthMode,
    pub hybrid_rho: f64,
    pub clip_hi: f64,
    pub components: NoiseComponents,
    pub poisson_threshold: f64,
    pub band_axis: BandAxis,
}

impl PairSampler {
    pub fn new(iso_set: Vec<u32>, dgain: DgainSpec, mode: SynthMode) -> Self {
        Self {
            iso_set,
            dgain,
            mode,
            hybrid_rho: 0.5,
            clip_hi: 1.0,
            components: NoiseComponents::default(),
            poisson_threshold: DEFAULT_POISSON_THRESHOLD,
            band_axis: BandAxis::Row,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub image_index: usize,
    pub patch_index: usize,
    pub iso: u32,
    pub dgain: f64,
    pub seed: u64,
    pub noisy: PackedImage,
    pub clean: PackedImage,
}

/// Crop `per_image` random patches of `patch x patch` mosaic pixels from each
/// clean image and synthesize a noisy partner for each.
///
/// Each patch draws from its own stream seeded by
/// `(master_seed, image_index, patch_index)`, so the batch is identical for
/// any worker count.
pub fn make_pair_batch(
    clean_frames: &[PackedImage],
    profile: &SensorProfile,
    sampler: &PairSampler,
    patch: usize,
    per_image: usize,
    master_seed: u64,
) -> Result<Vec<TrainingPair>> {
    if patch == 0 || !patch.is_multiple_of(2) {
        return Err(Error::Dimension(format!("patch size {patch} must be even and positive")));
    }
    if sampler.iso_set.is_empty() {
        return Err(Error::Domain("ISO preset list is empty".into()));
    }
    let ps = patch / 2;
    for (i, img) in clean_frames.iter().enumerate() {
        if img.space != ValueSpace::Normalized {
            return Err(Error::Domain(format!("clean image {i} is not normalized")));
        }
        if ps > img.width() || ps > img.height() {
            return Err(Error::Dimension(format!(
                "patch {patch} does not fit clean image {i} ({}x{} mosaic)",
                2 * img.width(),
                2 * img.height()
            )));
        }
    }

    let jobs: Vec<(usize, usize)> = (0..clean_frames.len())
        .flat_map(|i| (0..per_image).map(move |j| (i, j)))
        .collect();
    jobs.into_par_iter()
        .map(|(i, j)| {
            let img = &clean_frames[i];
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, i as u64, j as u64));
            let iso = sampler.iso_set[rng.random_range(0..sampler.iso_set.len())];
            let dgain = sampler.dgain.draw(&mut rng)?;
            let x0 = rng.random_range(0..=img.width() - ps);
            let y0 = rng.random_range(0..=img.height() - ps);
            let seed: u64 = rng.random();

            let mut clean = img.crop(x0, y0, ps, ps)?;
            let hi = sampler.clip_hi;
            clean.planes_mut().iter_mut().for_each(|p| p.mapv_inplace(|v| v.clamp(0.0, hi)));
            clean.clip_hi = hi;
            let cfg = SynthConfig {
                iso,
                dgain,
                mode: sampler.mode,
                hybrid_rho: sampler.hybrid_rho,
                clip_hi: hi,
                components: sampler.components,
                seed,
                poisson_threshold: sampler.poisson_threshold,
                band_axis: sampler.band_axis,
            };
            let noisy = synthesize_noisy(&clean, profile, &cfg)?;
            Ok(TrainingPair { image_index: i, patch_index: j, iso, dgain, seed, noisy, clean })
        })
        .collect()
}

/// Plane-domain slice helper for tests and tools: one mosaic line of a packed
/// image along the given axis.
pub fn mosaic_line(img: &PackedImage, axis: BandAxis, index: usize) -> Vec<f64> {
    let p = img.planes();
    let half = index / 2;
    let odd = index % 2;
    match axis {
        BandAxis::Row => {
            let (a, b) = if odd == 0 { (&p[0], &p[1]) } else { (&p[2], &p[3]) };
            let mut out = Vec::with_capacity(2 * img.width());
            for j in 0..img.width() {
                out.push(a[[half, j]]);
                out.push(b[[half, j]]);
            }
            out
        }
        BandAxis::Col => {
            let (a, b) = if odd == 0 { (&p[0], &p[2]) } else { (&p[1], &p[3]) };
            let mut out = Vec::with_capacity(2 * img.height());
            for i in 0..img.height() {
                out.push(a[[i, half]]);
                out.push(b[[i, half]]);
            }
            out
        }
    }
}
