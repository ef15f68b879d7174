//! Bayer RAW data model: mosaic frames, packed RGGB planes, crops and
//! normalization.
//!
//! A [`RawFrame`] is the single-channel mosaic as it comes off the sensor.
//! [`pack_rggb`] splits it into four half-resolution planes in R, Gr, Gb, B
//! order; plane `c` holds the mosaic samples at CFA position
//! `(c / 2, c % 2)`. Per-channel black levels use the same indexing.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plane order of a packed image.
pub const CHANNEL_NAMES: [&str; 4] = ["R", "Gr", "Gb", "B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Cfa {
    #[default]
    Rggb,
}

impl std::fmt::Display for Cfa {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cfa::Rggb => f.write_str("RGGB"),
        }
    }
}

impl std::str::FromStr for Cfa {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(Cfa::Rggb),
            other => Err(Error::UnsupportedCfa(other.to_string())),
        }
    }
}

/// What the stored numbers mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValueSpace {
    /// Raw digital numbers including the black pedestal.
    #[default]
    Dn,
    /// Digital numbers with the black level removed. May be negative.
    DnAboveBlack,
    /// `(dn - black) / (white - black)`, clipped to `[0, clip_hi]`.
    Normalized,
}

impl ValueSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValueSpace::Dn => "dn",
            ValueSpace::DnAboveBlack => "dn_above_black",
            ValueSpace::Normalized => "normalized",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dn" => Ok(ValueSpace::Dn),
            "dn_above_black" => Ok(ValueSpace::DnAboveBlack),
            "normalized" => Ok(ValueSpace::Normalized),
            other => Err(Error::Format(format!("unknown value space {other:?}"))),
        }
    }
}

/// On-disk sample type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U16,
    F32,
}

/// Capture metadata carried alongside pixel data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub cfa: Cfa,
    /// Black level per CFA position (R, Gr, Gb, B).
    pub black_level: [f64; 4],
    pub white_level: f64,
    pub camera_id: String,
    pub iso: u32,
    pub exposure_s: Option<f64>,
}

impl FrameMeta {
    /// Metadata with a scalar black level broadcast to all four positions.
    pub fn new(camera_id: impl Into<String>, iso: u32, black: f64, white: f64) -> Self {
        Self {
            cfa: Cfa::Rggb,
            black_level: [black; 4],
            white_level: white,
            camera_id: camera_id.into(),
            iso,
            exposure_s: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.white_level.is_finite() {
            return Err(Error::Profile("white level must be finite".into()));
        }
        for (c, &b) in self.black_level.iter().enumerate() {
            if !(b >= 0.0 && b < self.white_level) {
                return Err(Error::Profile(format!(
                    "black level {b} for {} must satisfy 0 <= black < white ({})",
                    CHANNEL_NAMES[c], self.white_level
                )));
            }
        }
        Ok(())
    }

    /// `white - black[c]`, the normalization range of channel `c`.
    pub fn range(&self, c: usize) -> f64 {
        self.white_level - self.black_level[c]
    }

    /// True when all four black levels are equal (camera reported a scalar).
    pub fn scalar_black(&self) -> bool {
        self.black_level.iter().all(|&b| b == self.black_level[0])
    }
}

/// Effective imaging area in mosaic pixels. Offsets and extents are even so
/// the CFA phase is preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Roi {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if !x0.is_multiple_of(2) || !y0.is_multiple_of(2) || !w.is_multiple_of(2) || !h.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "ROI ({x0},{y0},{w},{h}) must have even offsets and extents"
            )));
        }
        if w == 0 || h == 0 {
            return Err(Error::Dimension("ROI must be non-empty".into()));
        }
        Ok(Self { x0, y0, w, h })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { x0: 0, y0: 0, w: width, h: height }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 + self.w <= width && self.y0 + self.h <= height
    }
}

/// Single-channel Bayer mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    data: Array2<f64>,
    pub dtype: SampleType,
    pub space: ValueSpace,
    pub meta: FrameMeta,
}

impl RawFrame {
    /// Builds a frame, checking dimensions, levels and sample values.
    ///
    /// Negative samples are only accepted in [`ValueSpace::DnAboveBlack`],
    /// where they represent zero-mean noise residuals.
    pub fn new(data: Array2<f64>, dtype: SampleType, space: ValueSpace, meta: FrameMeta) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "mosaic must have even, non-zero dimensions, got {w}x{h}"
            )));
        }
        meta.validate()?;
        let allow_negative = space == ValueSpace::DnAboveBlack;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || (!allow_negative && **v < 0.0)) {
            return Err(Error::Domain(format!("invalid sample value {v}")));
        }
        if dtype == SampleType::U16 {
            if let Some(v) = data.iter().find(|v| v.fract() != 0.0 || **v < 0.0 || **v > u16::MAX as f64) {
                return Err(Error::Format(format!("value {v} is not representable as u16")));
            }
        }
        Ok(Self { data, dtype, space, meta })
    }

    /// Convenience constructor for u16 DN data.
    pub fn from_u16(width: usize, height: usize, values: &[u16], meta: FrameMeta) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} samples, got {}",
                width * height,
                values.len()
            )));
        }
        let data = Array2::from_shape_fn((height, width), |(y, x)| values[y * width + x] as f64);
        Self::new(data, SampleType::U16, ValueSpace::Dn, meta)
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Crop to a region of interest, keeping the CFA phase.
    pub fn crop(&self, roi: &Roi) -> Result<RawFrame> {
        if !roi.fits(self.width(), self.height()) {
            return Err(Error::Dimension(format!(
                "ROI {roi:?} exceeds frame {}x{}",
                self.width(),
                self.height()
            )));
        }
        let data = self
            .data
            .slice(s![roi.y0..roi.y0 + roi.h, roi.x0..roi.x0 + roi.w])
            .to_owned();
        Ok(RawFrame { data, dtype: self.dtype, space: self.space, meta: self.meta.clone() })
    }
}

/// Four-plane RGGB image at half the mosaic resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedImage {
    planes: [Array2<f64>; 4],
    pub space: ValueSpace,
    /// Upper clip bound; meaningful for normalized images.
    pub clip_hi: f64,
    pub meta: FrameMeta,
}

impl PackedImage {
    pub fn new(planes: [Array2<f64>; 4], space: ValueSpace, clip_hi: f64, meta: FrameMeta) -> Result<Self> {
        let dim = planes[0].dim();
        if planes.iter().any(|p| p.dim() != dim) {
            return Err(Error::Dimension(format!(
                "packed planes differ in size: {:?}",
                planes.iter().map(|p| p.dim()).collect::<Vec<_>>()
            )));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Dimension("packed planes must be non-empty".into()));
        }
        Ok(Self { planes, space, clip_hi, meta })
    }

    /// Image whose four planes are all `value`.
    pub fn constant(width: usize, height: usize, value: f64, space: ValueSpace, meta: FrameMeta) -> Self {
        let plane = Array2::from_elem((height, width), value);
        Self {
            planes: [plane.clone(), plane.clone(), plane.clone(), plane],
            space,
            clip_hi: 1.0,
            meta,
        }
    }

    /// Plane width (half the mosaic width).
    pub fn width(&self) -> usize {
        self.planes[0].ncols()
    }

    /// Plane height (half the mosaic height).
    pub fn height(&self) -> usize {
        self.planes[0].nrows()
    }

    pub fn pixel_count(&self) -> usize {
        4 * self.width() * self.height()
    }

    pub fn plane(&self, c: usize) -> &Array2<f64> {
        &self.planes[c]
    }

    pub fn planes(&self) -> &[Array2<f64>; 4] {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut [Array2<f64>; 4] {
        &mut self.planes
    }

    pub fn into_planes(self) -> [Array2<f64>; 4] {
        self.planes
    }

    /// Same metadata and space, different planes.
    pub fn with_planes(&self, planes: [Array2<f64>; 4]) -> Result<Self> {
        Self::new(planes, self.space, self.clip_hi, self.meta.clone())
    }

    /// Crop every plane at plane coordinates `(x0, y0)` with extent `w x h`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PackedImage> {
        if x0 + w > self.width() || y0 + h > self.height() || w == 0 || h == 0 {
            return Err(Error::Dimension(format!(
                "crop {w}x{h} at ({x0},{y0}) exceeds planes {}x{}",
                self.width(),
                self.height()
            )));
        }
        let planes = std::array::from_fn(|c| self.planes[c].slice(s![y0..y0 + h, x0..x0 + w]).to_owned());
        Ok(PackedImage { planes, space: self.space, clip_hi: self.clip_hi, meta: self.meta.clone() })
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.planes.iter().flat_map(|p| p.iter().copied())
    }
}

/// Split a mosaic into R, Gr, Gb, B planes. The value space is copied from
/// the frame.
pub fn pack_rggb(frame: &RawFrame) -> Result<PackedImage> {
    match frame.meta.cfa {
        Cfa::Rggb => {}
    }
    let (h, w) = frame.data.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Dimension(format!("mosaic {w}x{h} has odd dimensions")));
    }
    let planes = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .map(|(dy, dx)| frame.data.slice(s![dy..;2, dx..;2]).to_owned());
    PackedImage::new(planes, frame.space, 1.0, frame.meta.clone())
}

/// Reassemble the mosaic from packed planes.
///
/// The storage type is u16 when the image is in raw DN and every sample is
/// an integer in range, f32 otherwise.
pub fn unpack_rggb(img: &PackedImage) -> Result<RawFrame> {
    let (ph, pw) = img.planes[0].dim();
    if img.planes.iter().any(|p| p.dim() != (ph, pw)) {
        return Err(Error::Dimension("packed planes differ in size".into()));
    }
    let mut data = Array2::zeros((2 * ph, 2 * pw));
    for (c, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        data.slice_mut(s![dy..;2, dx..;2]).assign(&img.planes[c]);
    }
    let integral = data.iter().all(|v| v.fract() == 0.0 && *v >= 0.0 && *v <= u16::MAX as f64);
    let dtype = if img.space == ValueSpace::Dn && integral {
        SampleType::U16
    } else {
        SampleType::F32
    };
    RawFrame::new(data, dtype, img.space, img.meta.clone())
}

/// Remove the per-channel black level from a raw-DN image.
pub fn subtract_black(img: &PackedImage) -> Result<PackedImage> {
    match img.space {
        ValueSpace::Dn => {}
        ValueSpace::DnAboveBlack => return Ok(img.clone()),
        ValueSpace::Normalized => {
            return Err(Error::Domain("cannot subtract black level from a normalized image".into()))
        }
    }
    let mut planes = img.planes.clone();
    for (c, p) in planes.iter_mut().enumerate() {
        let b = img.meta.black_level[c];
        p.mapv_inplace(|v| v - b);
    }
    PackedImage::new(planes, ValueSpace::DnAboveBlack, img.clip_hi, img.meta.clone())
}

/// Map DN values to `[0, clip_hi]` using the per-channel black level and the
/// white level.
pub fn normalize(img: &PackedImage, clip_hi: f64) -> Result<PackedImage> {
    let subtract = match img.space {
        ValueSpace::Dn => true,
        ValueSpace::DnAboveBlack => false,
        ValueSpace::Normalized => {
            return Err(Error::Domain("image is already normalized".into()));
        }
    };
    if !(clip_hi > 0.0) {
        return Err(Error::Domain(format!("clip_hi must be positive, got {clip_hi}")));
    }
    let meta = &img.meta;
    let mut planes = img.planes.clone();
    for (c, p) in planes.iter_mut().enumerate() {
        let black = meta.black_level[c];
        let range = meta.white_level - black;
        if !(range > 0.0) {
            return Err(Error::Profile(format!(
                "white level {} must exceed black level {black}",
                meta.white_level
            )));
        }
        let offset = if subtract { black } else { 0.0 };
        p.mapv_inplace(|v| ((v - offset) / range).clamp(0.0, clip_hi));
    }
    PackedImage::new(planes, ValueSpace::Normalized, clip_hi, meta.clone())
}

/// Inverse of [`normalize`] into raw DN. Values are not re-clipped.
pub fn denormalize(img: &PackedImage) -> Result<PackedImage> {
    denormalize_into(img, ValueSpace::Dn)
}

/// Inverse of [`normalize`] into DN above black.
pub fn denormalize_above_black(img: &PackedImage) -> Result<PackedImage> {
    denormalize_into(img, ValueSpace::DnAboveBlack)
}

fn denormalize_into(img: &PackedImage, target: ValueSpace) -> Result<PackedImage> {
    if img.space != ValueSpace::Normalized {
        return Err(Error::Domain("image is not normalized".into()));
    }
    let meta = &img.meta;
    let mut planes = img.planes.clone();
    for (c, p) in planes.iter_mut().enumerate() {
        let black = meta.black_level[c];
        let range = meta.white_level - black;
        if !(range > 0.0) || !black.is_finite() {
            return Err(Error::Profile(format!(
                "invalid levels black={black} white={}",
                meta.white_level
            )));
        }
        let offset = if target == ValueSpace::Dn { black } else { 0.0 };
        p.mapv_inplace(|v| v * range + offset);
    }
    PackedImage::new(planes, target, img.clip_hi, meta.clone())
}

/// Crop all planes to `w x h` around the center. The offset is
/// `((W - w) / 2, (H - h) / 2)` rounded down.
pub fn center_crop(img: &PackedImage, w: usize, h: usize) -> Result<PackedImage> {
    if w > img.width() || h > img.height() {
        return Err(Error::Dimension(format!(
            "crop {w}x{h} larger than planes {}x{}",
            img.width(),
            img.height()
        )));
    }
    img.crop((img.width() - w) / 2, (img.height() - h) / 2, w, h)
}
