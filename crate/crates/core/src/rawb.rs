//! RAWB container.
//!
//! Line one is a UTF-8 JSON header terminated by `\n`; the rest of the file
//! is a row-major little-endian payload. Multi-channel layouts store whole
//! planes back to back (R, Gr, Gb, B for `rggb`; R, G, B for `rgb`).
//! `width` and `height` are the dimensions of one stored plane.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isp::RgbImage;
use crate::raw::{Cfa, FrameMeta, PackedImage, RawFrame, SampleType, ValueSpace};

pub const MAGIC: &str = "RAWB1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Mosaic,
    Rggb,
    Rgb,
}

impl Layout {
    fn channels(self) -> usize {
        match self {
            Layout::Mosaic => 1,
            Layout::Rggb => 4,
            Layout::Rgb => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub magic: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dtype: SampleType,
    pub layout: Layout,
    pub space: ValueSpace,
    pub black_level: [f64; 4],
    pub white_level: f64,
    pub camera_id: String,
    pub iso: u32,
    pub exposure_s: Option<f64>,
    pub clip_hi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfa: Option<Cfa>,
}

impl Header {
    fn new(width: usize, height: usize, layout: Layout, dtype: SampleType, space: ValueSpace, clip_hi: f64, meta: &FrameMeta) -> Self {
        Self {
            magic: MAGIC.to_string(),
            width,
            height,
            channels: layout.channels(),
            dtype,
            layout,
            space,
            black_level: meta.black_level,
            white_level: meta.white_level,
            camera_id: meta.camera_id.clone(),
            iso: meta.iso,
            exposure_s: meta.exposure_s,
            clip_hi,
            cfa: None,
        }
    }

    pub fn meta(&self) -> FrameMeta {
        FrameMeta {
            cfa: self.cfa.unwrap_or_default(),
            black_level: self.black_level,
            white_level: self.white_level,
            camera_id: self.camera_id.clone(),
            iso: self.iso,
            exposure_s: self.exposure_s,
        }
    }

    fn sample_bytes(&self) -> usize {
        match self.dtype {
            SampleType::U16 => 2,
            SampleType::F32 => 4,
        }
    }
}

/// Any image a RAWB file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum RawbImage {
    Mosaic(RawFrame),
    Packed(PackedImage),
    Rgb(RgbImage),
}

fn push_samples<'a>(out: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>, dtype: SampleType) -> Result<()> {
    for &v in values {
        match dtype {
            SampleType::U16 => {
                if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
                    return Err(Error::Format(format!("value {v} is not representable as u16")));
                }
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
            SampleType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    Ok(())
}

fn encode(header: &Header, planes: &[&Array2<f64>]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(planes.len() * header.width * header.height * header.sample_bytes());
    for p in planes {
        push_samples(&mut out, p.iter(), header.dtype)?;
    }
    Ok(out)
}

fn integral_dn(space: ValueSpace, values: impl Iterator<Item = f64>) -> bool {
    let mut values = values;
    space == ValueSpace::Dn && values.all(|v| v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v))
}

pub fn encode_frame(frame: &RawFrame) -> Result<Vec<u8>> {
    let header = Header::new(frame.width(), frame.height(), Layout::Mosaic, frame.dtype, frame.space, 1.0, &frame.meta);
    encode(&header, &[frame.data()])
}

/// Encode packed planes, choosing u16 for integral raw DN and f32 otherwise.
pub fn encode_packed(img: &PackedImage) -> Result<Vec<u8>> {
    let dtype = if integral_dn(img.space, img.values()) { SampleType::U16 } else { SampleType::F32 };
    encode_packed_as(img, dtype)
}

pub fn encode_packed_as(img: &PackedImage, dtype: SampleType) -> Result<Vec<u8>> {
    let header = Header::new(img.width(), img.height(), Layout::Rggb, dtype, img.space, img.clip_hi, &img.meta);
    let planes: Vec<&Array2<f64>> = img.planes().iter().collect();
    encode(&header, &planes)
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let (h, w, _) = img.data.dim();
    let header = Header::new(w, h, Layout::Rgb, SampleType::F32, ValueSpace::Normalized, 1.0, &img.meta);
    let planes: Vec<Array2<f64>> = (0..3)
        .map(|c| img.data.index_axis(ndarray::Axis(2), c).to_owned())
        .collect();
    let refs: Vec<&Array2<f64>> = planes.iter().collect();
    encode(&header, &refs)
}

/// Split a RAWB byte buffer into its parsed header and payload.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    if value.get("magic").and_then(|m| m.as_str()) != Some(MAGIC) {
        return Err(Error::Format("bad magic".into()));
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.channels != header.layout.channels() {
        return Err(Error::Format(format!(
            "layout {:?} requires {} channels, header says {}",
            header.layout,
            header.layout.channels(),
            header.channels
        )));
    }
    let payload = &bytes[nl + 1..];
    let expected = header.width * header.height * header.channels * header.sample_bytes();
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: expected {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "payload has {} trailing bytes for dtype {:?}",
            payload.len() - expected,
            header.dtype
        )));
    }
    Ok((header, payload))
}

fn decode_planes(header: &Header, payload: &[u8]) -> Vec<Array2<f64>> {
    let (w, h) = (header.width, header.height);
    let n = w * h;
    let size = header.sample_bytes();
    (0..header.channels)
        .map(|c| {
            let chunk = &payload[c * n * size..(c + 1) * n * size];
            let values: Vec<f64> = match header.dtype {
                SampleType::U16 => chunk
                    .chunks_exact(2)
                    .map(|b| u16::from_le_bytes([b[0], b[1]]) as f64)
                    .collect(),
                SampleType::F32 => chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
            };
            Array2::from_shape_vec((h, w), values).expect("payload length checked")
        })
        .collect()
}

pub fn decode(bytes: &[u8]) -> Result<RawbImage> {
    let (header, payload) = parse_header(bytes)?;
    let meta = header.meta();
    let mut planes = decode_planes(&header, payload);
    match header.layout {
        Layout::Mosaic => {
            let data = planes.pop().expect("one plane");
            Ok(RawbImage::Mosaic(RawFrame::new(data, header.dtype, header.space, meta)?))
        }
        Layout::Rggb => {
            let planes: [Array2<f64>; 4] = planes.try_into().expect("four planes");
            Ok(RawbImage::Packed(PackedImage::new(planes, header.space, header.clip_hi, meta)?))
        }
        Layout::Rgb => {
            let (h, w) = (header.height, header.width);
            let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| planes[c][[y, x]]);
            Ok(RawbImage::Rgb(RgbImage { data, meta, description: String::new() }))
        }
    }
}

pub fn read(path: impl AsRef<Path>) -> Result<RawbImage> {
    decode(&fs::read(path)?)
}

/// Read a mosaic frame.
pub fn read_frame(path: impl AsRef<Path>) -> Result<RawFrame> {
    match read(path)? {
        RawbImage::Mosaic(f) => Ok(f),
        _ => Err(Error::Format("expected layout \"mosaic\"".into())),
    }
}

/// Read a packed image; mosaic files are packed on load.
pub fn read_packed(path: impl AsRef<Path>) -> Result<PackedImage> {
    match read(path)? {
        RawbImage::Packed(p) => Ok(p),
        RawbImage::Mosaic(f) => crate::raw::pack_rggb(&f),
        RawbImage::Rgb(_) => Err(Error::Format("expected a Bayer layout, found rgb".into())),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_frame(frame: &RawFrame, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_frame(frame)?)
}

pub fn write_packed(img: &PackedImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_packed(img)?)
}

pub fn write_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_rgb(img)?)
}
