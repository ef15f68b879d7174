//! Basic ISP: white balance, bilinear demosaic, color matrix, sRGB gamma.
//! Used to render RAW predictions for perceptual metrics.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{unpack_rggb, FrameMeta, PackedImage, ValueSpace};
use crate::stats;

/// Display-referred RGB image, `(height, width, 3)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub data: Array3<f64>,
    pub meta: FrameMeta,
    /// Settings that produced the image.
    pub description: String,
}

impl RgbImage {
    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteBalance {
    GrayWorld,
    Fixed([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gamma {
    Srgb,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Demosaic {
    #[default]
    Bilinear,
}

pub const IDENTITY_CCM: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IspConfig {
    pub wb: WhiteBalance,
    pub ccm: [[f64; 3]; 3],
    pub gamma: Gamma,
    #[serde(default)]
    pub demosaic: Demosaic,
}

impl Default for IspConfig {
    fn default() -> Self {
        Self { wb: WhiteBalance::GrayWorld, ccm: IDENTITY_CCM, gamma: Gamma::Srgb, demosaic: Demosaic::Bilinear }
    }
}

impl IspConfig {
    pub fn validate(&self) -> Result<()> {
        if let WhiteBalance::Fixed(g) = self.wb {
            if !g.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("white-balance gains must be positive, got {g:?}")));
            }
        }
        if !self.ccm.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Domain("color matrix has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Gray-world gains `[mean(G)/mean(R), 1, mean(G)/mean(B)]`, with
/// `G = (Gr + Gb) / 2`. A channel with zero mean keeps unit gain.
pub fn gray_world_gains(img: &PackedImage) -> [f64; 3] {
    let mean = |c: usize| stats::sum(img.plane(c).iter().copied()) / img.plane(c).len() as f64;
    let g = 0.5 * (mean(1) + mean(2));
    let gain = |m: f64| {
        let r = g / m;
        if r.is_finite() && r > 0.0 {
            r
        } else {
            log::warn!("gray-world gain undefined (channel mean {m}); using 1");
            1.0
        }
    };
    [gain(mean(0)), 1.0, gain(mean(3))]
}

/// Standard sRGB transfer function. Inputs outside `[0, 1]` are clamped.
pub fn srgb_gamma(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

/// As [`srgb_gamma`] but rejects out-of-range input.
pub fn srgb_gamma_strict(v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("sRGB gamma input {v} outside [0, 1]")));
    }
    Ok(srgb_gamma(v))
}

pub fn srgb_gamma_inverse(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 12.92 * 0.0031308 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Reflect-101 index: mirrors about the edge sample, which keeps Bayer parity.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// CFA color at mosaic position: 0 = R, 1 = G, 2 = B.
fn rggb_color(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Bilinear demosaic of an RGGB mosaic.
pub fn demosaic_bilinear(mosaic: &Array2<f64>) -> Array3<f64> {
    let (h, w) = mosaic.dim();
    let at = |y: isize, x: isize| mosaic[[reflect(y, h), reflect(x, w)]];
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let here = rggb_color(y, x);
        let (yi, xi) = (y as isize, x as isize);
        if here == c {
            return mosaic[[y, x]];
        }
        if c == 1 {
            // Green at R or B: four edge neighbours.
            return ((at(yi - 1, xi) + at(yi + 1, xi)) + (at(yi, xi - 1) + at(yi, xi + 1))) * 0.25;
        }
        if here == 1 {
            // R or B at green: two neighbours on the row or column holding c.
            return if rggb_color(y, x ^ 1) == c {
                (at(yi, xi - 1) + at(yi, xi + 1)) * 0.5
            } else {
                (at(yi - 1, xi) + at(yi + 1, xi)) * 0.5
            };
        }
        // R at B or B at R: four diagonals.
        ((at(yi - 1, xi - 1) + at(yi - 1, xi + 1)) + (at(yi + 1, xi - 1) + at(yi + 1, xi + 1))) * 0.25
    })
}

/// Render a normalized packed image to sRGB at twice the plane resolution.
pub fn run_isp(img: &PackedImage, cfg: &IspConfig) -> Result<RgbImage> {
    cfg.validate()?;
    if img.space != ValueSpace::Normalized {
        return Err(Error::Domain(format!("ISP expects normalized input, got {}", img.space.as_str())));
    }
    let gains = match cfg.wb {
        WhiteBalance::GrayWorld => gray_world_gains(img),
        WhiteBalance::Fixed(g) => g,
    };
    let plane_gain = [gains[0], gains[1], gains[1], gains[2]];
    let mut planes = img.planes().clone();
    for (p, g) in planes.iter_mut().zip(plane_gain) {
        if g != 1.0 {
            p.mapv_inplace(|v| v * g);
        }
    }
    let balanced = PackedImage::new(planes, ValueSpace::Normalized, f64::INFINITY, img.meta.clone())?;
    let mosaic = unpack_rggb(&balanced)?.into_data();
    let mut rgb = match cfg.demosaic {
        Demosaic::Bilinear => demosaic_bilinear(&mosaic),
    };

    let identity = cfg.ccm == IDENTITY_CCM;
    let mut clipped = 0usize;
    for mut px in rgb.rows_mut() {
        let v = [px[0], px[1], px[2]];
        let m = if identity {
            v
        } else {
            let row = |r: [f64; 3]| r[0] * v[0] + r[1] * v[1] + r[2] * v[2];
            [row(cfg.ccm[0]), row(cfg.ccm[1]), row(cfg.ccm[2])]
        };
        for c in 0..3 {
            if !(0.0..=1.0).contains(&m[c]) {
                clipped += 1;
            }
            px[c] = match cfg.gamma {
                Gamma::Srgb => srgb_gamma(m[c]),
                Gamma::None => m[c].clamp(0.0, 1.0),
            };
        }
    }
    if clipped > 0 {
        log::debug!("ISP clipped {clipped} values to [0, 1]");
    }

    let ccm = if identity { "identity".to_string() } else { format!("{:?}", cfg.ccm) };
    let gamma = match cfg.gamma {
        Gamma::Srgb => "srgb",
        Gamma::None => "none",
    };
    let wb = match cfg.wb {
        WhiteBalance::GrayWorld => "gray_world",
        WhiteBalance::Fixed(_) => "fixed",
    };
    let description = format!(
        "wb={wb} gains=[{},{},{}] demosaic=bilinear ccm={ccm} gamma={gamma}",
        gains[0], gains[1], gains[2]
    );
    Ok(RgbImage { data: rgb, meta: img.meta.clone(), description })
}

/// Binary PPM (P6) with 16-bit big-endian samples.
pub fn encode_ppm16(img: &RgbImage) -> Vec<u8> {
    let (h, w, _) = img.data.dim();
    let mut out = format!("P6\n{w} {h}\n65535\n").into_bytes();
    out.reserve(h * w * 6);
    for v in img.data.iter() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_ppm16(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_ppm16(img))?;
    f.flush()?;
    Ok(())
}
