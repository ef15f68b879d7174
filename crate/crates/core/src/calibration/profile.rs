use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raw::{FrameMeta, PackedImage, RawFrame, Roi, SampleType, ValueSpace};
use crate::rawb;

/// Noise parameters of one camera at one ISO, in DN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// System gain, DN per electron.
    #[serde(rename = "K")]
    pub k: f64,
    pub sigma_read: f64,
    pub sigma_row: f64,
    #[serde(default = "default_quant")]
    pub quant_step: f64,
    /// Optional per-frame offset std; zero unless configured.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub sigma_frame: f64,
}

fn default_quant() -> f64 {
    1.0
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

impl NoiseParams {
    pub fn new(k: f64, sigma_read: f64, sigma_row: f64) -> Self {
        Self { k, sigma_read, sigma_row, quant_step: 1.0, sigma_frame: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Profile(format!("system gain K must be positive, got {}", self.k)));
        }
        for (name, v) in [
            ("sigma_read", self.sigma_read),
            ("sigma_row", self.sigma_row),
            ("quant_step", self.quant_step),
            ("sigma_frame", self.sigma_frame),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Profile(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Everything known about one ISO setting.
#[derive(Debug, Clone, PartialEq)]
pub struct IsoProfile {
    pub params: NoiseParams,
    /// Mean dark frame over the effective ROI, at mosaic resolution.
    pub dark_shading: Option<Array2<f64>>,
    /// Shading-corrected dark residuals in DN above black.
    pub dark_library: Vec<PackedImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorProfile {
    pub camera_id: String,
    pub black_level: [f64; 4],
    pub white_level: f64,
    pub effective_roi: Roi,
    pub isos: BTreeMap<u32, IsoProfile>,
}

impl SensorProfile {
    pub fn validate(&self) -> Result<()> {
        self.meta(0).validate()?;
        for (iso, p) in &self.isos {
            p.params.validate().map_err(|e| Error::Profile(format!("ISO {iso}: {e}")))?;
            if let Some(s) = &p.dark_shading {
                if s.dim() != (self.effective_roi.h, self.effective_roi.w) {
                    return Err(Error::Profile(format!(
                        "ISO {iso}: shading {:?} does not match ROI {:?}",
                        s.dim(),
                        self.effective_roi
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn iso(&self, iso: u32) -> Result<&IsoProfile> {
        self.isos
            .get(&iso)
            .ok_or_else(|| Error::Profile(format!("ISO {iso} not in profile for {}", self.camera_id)))
    }

    pub fn params(&self, iso: u32) -> Result<&NoiseParams> {
        Ok(&self.iso(iso)?.params)
    }

    /// Frame metadata implied by the profile at `iso`.
    pub fn meta(&self, iso: u32) -> FrameMeta {
        FrameMeta {
            cfa: Default::default(),
            black_level: self.black_level,
            white_level: self.white_level,
            camera_id: self.camera_id.clone(),
            iso,
            exposure_s: None,
        }
    }

    /// `white - black[c]`.
    pub fn range(&self, c: usize) -> f64 {
        self.white_level - self.black_level[c]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IsoJson {
    #[serde(flatten)]
    params: NoiseParams,
    #[serde(default)]
    dark_shading_path: Option<String>,
    #[serde(default)]
    dark_library: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileJson {
    camera_id: String,
    black_level: [f64; 4],
    white_level: f64,
    effective_roi: Roi,
    isos: BTreeMap<String, IsoJson>,
}

fn data_dir_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("profile");
    format!("{stem}.data")
}

/// Write the profile JSON to `path` and its shading maps and dark residuals
/// as RAWB files in a sibling `<stem>.data/` directory. Paths in the JSON are
/// relative to the JSON file.
pub fn save_profile(profile: &SensorProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    profile.validate()?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir_name = data_dir_name(path);
    let data_dir = base.join(&dir_name);
    let needs_dir = profile
        .isos
        .values()
        .any(|p| p.dark_shading.is_some() || !p.dark_library.is_empty());
    if needs_dir {
        fs::create_dir_all(&data_dir)?;
    }

    let mut isos = BTreeMap::new();
    for (&iso, p) in &profile.isos {
        let dark_shading_path = match &p.dark_shading {
            Some(s) => {
                let name = format!("iso{iso}_shading.rawb");
                let frame = RawFrame::new(s.clone(), SampleType::F32, ValueSpace::Dn, profile.meta(iso))?;
                rawb::write_frame(&frame, data_dir.join(&name))?;
                Some(format!("{dir_name}/{name}"))
            }
            None => None,
        };
        let mut dark_library = Vec::with_capacity(p.dark_library.len());
        for (i, r) in p.dark_library.iter().enumerate() {
            let name = format!("iso{iso}_dark_{i:03}.rawb");
            let bytes = rawb::encode_packed_as(r, SampleType::F32)?;
            fs::write(data_dir.join(&name), bytes)?;
            dark_library.push(format!("{dir_name}/{name}"));
        }
        isos.insert(iso.to_string(), IsoJson { params: p.params, dark_shading_path, dark_library });
    }
    let json = ProfileJson {
        camera_id: profile.camera_id.clone(),
        black_level: profile.black_level,
        white_level: profile.white_level,
        effective_roi: profile.effective_roi,
        isos,
    };
    fs::write(path, serde_json::to_string_pretty(&json)?)?;
    Ok(())
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<SensorProfile> {
    let path = path.as_ref();
    let json: ProfileJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut isos = BTreeMap::new();
    for (key, entry) in json.isos {
        let iso: u32 = key
            .parse()
            .map_err(|_| Error::Profile(format!("ISO key {key:?} is not an integer")))?;
        let dark_shading = match &entry.dark_shading_path {
            Some(rel) => Some(rawb::read_frame(resolve(&base, rel))?.into_data()),
            None => None,
        };
        let dark_library = entry
            .dark_library
            .iter()
            .map(|rel| rawb::read_packed(resolve(&base, rel)))
            .collect::<Result<Vec<_>>>()?;
        isos.insert(iso, IsoProfile { params: entry.params, dark_shading, dark_library });
    }
    let profile = SensorProfile {
        camera_id: json.camera_id,
        black_level: json.black_level,
        white_level: json.white_level,
        effective_roi: json.effective_roi,
        isos,
    };
    profile.validate()?;
    Ok(profile)
}
