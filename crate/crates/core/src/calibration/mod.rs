//! Sensor calibration from dark frames and photon-transfer statistics.
//!
//! Darks are reduced to a per-pixel shading map (which includes the black
//! pedestal), zero-mean residuals, and read/row noise levels. System gain is
//! either supplied or fitted from `(mean, variance)` photon-transfer points.

mod profile;

pub use profile::{load_profile, save_profile, IsoProfile, NoiseParams, SensorProfile};

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{pack_rggb, subtract_black, PackedImage, RawFrame, Roi, SampleType, ValueSpace};
use crate::stats::{self, CompensatedSum};

/// Axis along which banding noise is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandAxis {
    /// One offset per mosaic row.
    #[default]
    Row,
    /// One offset per mosaic column.
    Col,
}

impl std::str::FromStr for BandAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(BandAxis::Row),
            "col" => Ok(BandAxis::Col),
            other => Err(Error::Data(format!("band axis must be row or col, got {other:?}"))),
        }
    }
}

/// Per-pixel mean of the dark frames over `roi`, at mosaic resolution.
pub fn estimate_dark_shading(darks: &[RawFrame], roi: &Roi) -> Result<Array2<f64>> {
    if darks.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "dark shading needs at least 2 frames, got {}",
            darks.len()
        )));
    }
    let first = &darks[0];
    for (i, d) in darks.iter().enumerate().skip(1) {
        if d.meta.camera_id != first.meta.camera_id || d.meta.iso != first.meta.iso {
            return Err(Error::Profile(format!(
                "dark frame {i} is {} ISO {}, expected {} ISO {}",
                d.meta.camera_id, d.meta.iso, first.meta.camera_id, first.meta.iso
            )));
        }
        if (d.width(), d.height()) != (first.width(), first.height()) {
            return Err(Error::Dimension(format!(
                "dark frame {i} is {}x{}, expected {}x{}",
                d.width(),
                d.height(),
                first.width(),
                first.height()
            )));
        }
    }
    if !roi.fits(first.width(), first.height()) {
        return Err(Error::Dimension(format!(
            "ROI {roi:?} exceeds dark frames of {}x{}",
            first.width(),
            first.height()
        )));
    }

    let views: Vec<ArrayView2<f64>> = darks
        .iter()
        .map(|d| d.data().slice(s![roi.y0..roi.y0 + roi.h, roi.x0..roi.x0 + roi.w]))
        .collect();
    let m = darks.len() as f64;
    Ok(Array2::from_shape_fn((roi.h, roi.w), |p| {
        let mut acc = CompensatedSum::default();
        for v in &views {
            acc.add(v[p]);
        }
        acc.value() / m
    }))
}

/// Subtract the shading map from a dark frame, leaving signal-independent
/// noise in DN above black, packed to RGGB.
pub fn correct_dark_frame(dark: &RawFrame, shading: &Array2<f64>) -> Result<PackedImage> {
    if dark.data().dim() != shading.dim() {
        return Err(Error::Dimension(format!(
            "dark frame {:?} does not match shading {:?}",
            dark.data().dim(),
            shading.dim()
        )));
    }
    let residual = dark.data() - shading;
    let frame = RawFrame::new(residual, SampleType::F32, ValueSpace::DnAboveBlack, dark.meta.clone())?;
    pack_rggb(&frame)
}

/// Read (pixel-wise) and banding noise levels of a set of residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadNoise {
    pub sigma_read: f64,
    pub sigma_row: f64,
}

/// Mosaic lines of one packed image along `axis`, as pairs of plane slices.
fn mosaic_lines(img: &PackedImage, axis: BandAxis) -> Vec<[ndarray::ArrayView1<'_, f64>; 2]> {
    let p = img.planes();
    match axis {
        BandAxis::Row => (0..img.height())
            .flat_map(|i| [[p[0].row(i), p[1].row(i)], [p[2].row(i), p[3].row(i)]])
            .collect(),
        BandAxis::Col => (0..img.width())
            .flat_map(|j| [[p[0].column(j), p[2].column(j)], [p[1].column(j), p[3].column(j)]])
            .collect(),
    }
}

/// Estimate read and banding noise from zero-mean residual frames.
///
/// Each frame's mean is removed first, so a constant per-frame offset does
/// not register as banding. `sigma_row` is the sample standard deviation of
/// the line means pooled over all frames; `sigma_read` is the sample standard
/// deviation of what remains after subtracting each line's mean.
pub fn estimate_read_noise(residuals: &[PackedImage], axis: BandAxis) -> Result<ReadNoise> {
    if residuals.is_empty() {
        return Err(Error::InsufficientData("read noise needs at least one residual frame".into()));
    }
    let per_frame: Vec<(Vec<f64>, f64, usize)> = residuals
        .par_iter()
        .map(|img| {
            let frame_mean = stats::sum(img.values()) / img.pixel_count() as f64;
            let mut line_means = Vec::new();
            let mut ss = CompensatedSum::default();
            for [a, b] in mosaic_lines(img, axis) {
                let n = (a.len() + b.len()) as f64;
                let lm = stats::sum(a.iter().chain(b.iter()).map(|v| v - frame_mean)) / n;
                for v in a.iter().chain(b.iter()) {
                    let r = v - frame_mean - lm;
                    ss.add(r * r);
                }
                line_means.push(lm);
            }
            (line_means, ss.value(), img.pixel_count())
        })
        .collect();

    let mut line_means = Vec::new();
    let mut ss = CompensatedSum::default();
    let mut n = 0usize;
    for (lm, s, count) in per_frame {
        line_means.extend(lm);
        ss.add(s);
        n += count;
    }
    if n < 2 {
        return Err(Error::InsufficientData("residuals hold fewer than 2 pixels".into()));
    }
    let sigma_read = (ss.value() / (n - 1) as f64).max(0.0).sqrt();
    let sigma_row = stats::sample_variance(&line_means).unwrap_or(0.0).max(0.0).sqrt();
    Ok(ReadNoise { sigma_read, sigma_row })
}

/// Straight-line photon-transfer fit `variance = k * mean + floor`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainFit {
    pub k: f64,
    pub floor: f64,
    /// Set when the fitted gain is not positive.
    pub warning: Option<String>,
}

/// Ordinary least squares over `(mean_dn_above_black, variance_dn2)` points.
pub fn estimate_system_gain(points: &[(f64, f64)]) -> Result<GainFit> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InsufficientData(
            "gain fit needs at least 2 points with distinct means".into(),
        ));
    }
    let n = points.len() as f64;
    let mx = stats::sum(points.iter().map(|p| p.0)) / n;
    let my = stats::sum(points.iter().map(|p| p.1)) / n;
    let sxx = stats::sum(points.iter().map(|p| (p.0 - mx) * (p.0 - mx)));
    let sxy = stats::sum(points.iter().map(|p| (p.0 - mx) * (p.1 - my)));
    let k = sxy / sxx;
    let floor = my - k * mx;
    let warning = (k <= 0.0).then(|| format!("fitted system gain {k} is not positive"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(GainFit { k, floor, warning })
}

/// Photon-transfer point from two flats captured at the same level:
/// `(mean signal, var(a - b) / 2)`. Raw-DN inputs have the black level removed.
pub fn photon_transfer_point(a: &PackedImage, b: &PackedImage) -> Result<(f64, f64)> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Dimension("flat pair differs in size".into()));
    }
    let a = subtract_black(a)?;
    let b = subtract_black(b)?;
    let n = a.pixel_count() as f64;
    let mean = stats::sum(a.values().zip(b.values()).map(|(x, y)| 0.5 * (x + y))) / n;
    let diffs: Vec<f64> = a.values().zip(b.values()).map(|(x, y)| x - y).collect();
    let var = stats::sample_variance(&diffs)
        .ok_or_else(|| Error::InsufficientData("flat pair needs at least 2 pixels".into()))?;
    Ok((mean, 0.5 * var))
}

/// Variance of the 4-neighbour Laplacian over the valid region.
///
/// Used as a sharpness score; the variance is the population variance, the
/// usual convention for this blur measure.
pub fn laplacian_variance(plane: ArrayView2<f64>) -> Result<f64> {
    let (h, w) = plane.dim();
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("Laplacian needs at least 3x3, got {w}x{h}")));
    }
    let mut lap = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            lap.push(
                plane[[y - 1, x]] + plane[[y + 1, x]] + plane[[y, x - 1]] + plane[[y, x + 1]]
                    - 4.0 * plane[[y, x]],
            );
        }
    }
    Ok(stats::population_variance(&lap).unwrap_or(0.0))
}

/// Share of images the sharpness filter drops by default.
pub const DEFAULT_DROP_FRACTION: f64 = 0.2;

/// Keep-mask that drops the `floor(n * drop_fraction)` lowest-scoring images.
/// Ties are broken by input order.
pub fn sharpness_filter(scores: &[f64], drop_fraction: f64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Domain(format!("drop fraction {drop_fraction} outside [0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("sharpness score is NaN".into()));
    }
    let drop = (scores.len() as f64 * drop_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut keep = vec![true; scores.len()];
    for &i in order.iter().take(drop) {
        keep[i] = false;
    }
    Ok(keep)
}

/// Where system gains come from.
#[derive(Debug, Clone)]
pub enum GainSource {
    /// Calibrated gains supplied with the dataset, stored verbatim.
    Provided(BTreeMap<u32, f64>),
    /// Photon-transfer points per ISO, fitted by least squares.
    PhotonTransfer(BTreeMap<u32, Vec<(f64, f64)>>),
}

#[derive(Debug, Clone)]
pub struct ProfileInputs {
    pub camera_id: String,
    pub isos: Vec<u32>,
    pub darks_by_iso: BTreeMap<u32, Vec<RawFrame>>,
    pub gains: GainSource,
    pub roi: Roi,
    pub band_axis: BandAxis,
    pub quant_step: f64,
}

fn round_to_f32(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v as f32 as f64);
}

/// Assemble a [`SensorProfile`] from per-ISO dark frames and gains.
///
/// Residuals are taken against the mean of the same `M` frames, which shrinks
/// their variance by `(M - 1) / M`; the noise estimates are scaled back up by
/// `sqrt(M / (M - 1))`. Stored shading maps and residuals are rounded to f32,
/// the precision they are written to disk with.
pub fn build_profile(inputs: &ProfileInputs) -> Result<SensorProfile> {
    let first_dark = inputs
        .isos
        .iter()
        .find_map(|iso| inputs.darks_by_iso.get(iso).and_then(|d| d.first()))
        .ok_or_else(|| Error::Profile("no dark frames for any requested ISO".into()))?;
    let black_level = first_dark.meta.black_level;
    let white_level = first_dark.meta.white_level;

    let mut isos = BTreeMap::new();
    for &iso in &inputs.isos {
        let darks = inputs
            .darks_by_iso
            .get(&iso)
            .filter(|d| !d.is_empty())
            .ok_or_else(|| Error::Profile(format!("ISO {iso} has no dark frames")))?;
        if let Some(d) = darks.iter().find(|d| d.meta.iso != iso || d.meta.camera_id != inputs.camera_id) {
            return Err(Error::Profile(format!(
                "dark frame for {} ISO {} filed under {} ISO {iso}",
                d.meta.camera_id, d.meta.iso, inputs.camera_id
            )));
        }
        let mut shading = estimate_dark_shading(darks, &inputs.roi)?;
        let residuals: Vec<PackedImage> = darks
            .par_iter()
            .map(|d| correct_dark_frame(&d.crop(&inputs.roi)?, &shading))
            .collect::<Result<_>>()?;
        let noise = estimate_read_noise(&residuals, inputs.band_axis)?;
        let m = darks.len() as f64;
        let scale = (m / (m - 1.0)).sqrt();

        let k = match &inputs.gains {
            GainSource::Provided(g) => *g
                .get(&iso)
                .ok_or_else(|| Error::Profile(format!("no provided gain for ISO {iso}")))?,
            GainSource::PhotonTransfer(points) => {
                let pts = points
                    .get(&iso)
                    .ok_or_else(|| Error::Profile(format!("no photon-transfer points for ISO {iso}")))?;
                estimate_system_gain(pts)?.k
            }
        };
        let params = NoiseParams {
            k,
            sigma_read: noise.sigma_read * scale,
            sigma_row: noise.sigma_row * scale,
            quant_step: inputs.quant_step,
            sigma_frame: 0.0,
        };
        params.validate()?;

        round_to_f32(&mut shading);
        let dark_library = residuals
            .into_iter()
            .map(|r| {
                let mut planes = r.planes().clone();
                planes.iter_mut().for_each(round_to_f32);
                r.with_planes(planes)
            })
            .collect::<Result<Vec<_>>>()?;
        isos.insert(iso, IsoProfile { params, dark_shading: Some(shading), dark_library });
    }

    let profile = SensorProfile {
        camera_id: inputs.camera_id.clone(),
        black_level,
        white_level,
        effective_roi: inputs.roi,
        isos,
    };
    profile.validate()?;
    Ok(profile)
}
