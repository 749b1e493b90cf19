//! `WOC1` scene-pack files.
//!
//! Layout (little-endian): magic, version `u16`, grid min/max `f64×6`, voxel
//! `f64`, dims `u32×3`, camera count `u16`, channels `u16`, image H/W `u32×2`,
//! point count `u32`; then points `f32×4` each, feature maps `f32`,
//! calibration `f64` (9 intrinsic + 16 extrinsic per camera), labels `u8`,
//! weather flags (2 bytes).

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::WeatherFlags;
use crate::encoders::{CameraModel, FeatureMap};
use crate::grid::{GridSpec, LabelGrid};

pub const PACK_MAGIC: [u8; 4] = *b"WOC1";
pub const PACK_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("bad magic {found:?}, expected \"WOC1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found} (expected {PACK_VERSION})")]
    Version { found: u16 },
    #[error("file truncated in {section} section")]
    Truncated { section: &'static str },
    #[error("invalid {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenePack {
    pub spec: GridSpec,
    pub weather: WeatherFlags,
    pub points: Vec<[f32; 4]>,
    pub cameras: Vec<CameraModel>,
    pub feature_maps: Vec<FeatureMap>,
    pub labels: LabelGrid,
}

impl ScenePack {
    pub fn to_bytes(&self) -> Result<Vec<u8>, PackError> {
        let cams = self.cameras.len();
        if cams != self.feature_maps.len() || cams == 0 {
            return Err(PackError::Invalid(format!(
                "camera count {cams} vs {} feature maps",
                self.feature_maps.len()
            )));
        }
        let (c, h, w) = {
            let m = &self.feature_maps[0];
            (m.channels, m.height, m.width)
        };
        for (m, cam) in self.feature_maps.iter().zip(&self.cameras) {
            if (m.channels, m.height, m.width) != (c, h, w) || (cam.height, cam.width) != (h, w) {
                return Err(PackError::Invalid(
                    "feature maps of differing shapes".into(),
                ));
            }
            if m.data.len() != c * h * w {
                return Err(PackError::Invalid("feature map length".into()));
            }
        }
        if *self.labels.spec() != self.spec {
            return Err(PackError::Invalid(
                "label grid spec differs from pack spec".into(),
            ));
        }

        let mut out = Vec::new();
        out.extend_from_slice(&PACK_MAGIC);
        out.extend_from_slice(&PACK_VERSION.to_le_bytes());
        for v in self.spec.min.iter().chain(&self.spec.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.spec.voxel.to_le_bytes());
        for d in self.spec.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(cams as u16).to_le_bytes());
        out.extend_from_slice(&(c as u16).to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&(w as u32).to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in &self.feature_maps {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for cam in &self.cameras {
            for v in cam
                .intrinsics
                .iter()
                .flatten()
                .chain(cam.extrinsics.iter().flatten())
            {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.labels.labels());
        out.push(self.weather.rainy as u8);
        out.push(self.weather.night as u8);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PackError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().expect("4 bytes");
        if magic != PACK_MAGIC {
            return Err(PackError::BadMagic { found: magic });
        }
        let version = r.u16("header")?;
        if version != PACK_VERSION {
            return Err(PackError::Version { found: version });
        }
        let mut ext = [0.0; 6];
        for v in &mut ext {
            *v = r.f64("header")?;
        }
        let voxel = r.f64("header")?;
        let dims = [r.u32("header")?, r.u32("header")?, r.u32("header")?].map(|d| d as usize);
        let spec = GridSpec::new([ext[0], ext[1], ext[2]], [ext[3], ext[4], ext[5]], voxel)
            .map_err(|e| PackError::Invalid(format!("grid: {e}")))?;
        if spec.dims != dims {
            return Err(PackError::Invalid(format!(
                "dims {dims:?} disagree with extent {:?}",
                spec.dims
            )));
        }
        let cams = r.u16("header")? as usize;
        let c = r.u16("header")? as usize;
        let h = r.u32("header")? as usize;
        let w = r.u32("header")? as usize;
        let n_points = r.u32("header")? as usize;

        let raw = r.take(n_points.saturating_mul(16), "points")?;
        let points = raw
            .chunks_exact(16)
            .map(|ch| {
                std::array::from_fn(|i| {
                    f32::from_le_bytes(ch[4 * i..4 * i + 4].try_into().unwrap())
                })
            })
            .collect();

        let per_map = c * h * w;
        let raw = r.take(cams.saturating_mul(per_map).saturating_mul(4), "features")?;
        let feature_maps = raw
            .chunks_exact((per_map * 4).max(1))
            .take(cams)
            .map(|ch| FeatureMap {
                channels: c,
                height: h,
                width: w,
                data: ch
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            })
            .collect();

        let mut cameras = Vec::with_capacity(cams);
        for _ in 0..cams {
            let mut k = [[0.0; 3]; 3];
            for v in k.iter_mut().flatten() {
                *v = r.f64("calibration")?;
            }
            let mut e = [[0.0; 4]; 4];
            for v in e.iter_mut().flatten() {
                *v = r.f64("calibration")?;
            }
            cameras.push(
                CameraModel::new(k, e, h, w)
                    .map_err(|e| PackError::Invalid(format!("camera: {e}")))?,
            );
        }

        let labels = r.take(spec.num_voxels(), "labels")?.to_vec();
        let labels = LabelGrid::from_labels(spec, labels)
            .map_err(|e| PackError::Invalid(format!("labels: {e}")))?;
        let flags = r.take(2, "weather")?;
        if flags.iter().any(|&b| b > 1) {
            return Err(PackError::Invalid(format!("weather flags {flags:?}")));
        }
        let weather = WeatherFlags {
            rainy: flags[0] == 1,
            night: flags[1] == 1,
        };
        if r.pos != bytes.len() {
            return Err(PackError::Invalid(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ScenePack {
            spec,
            weather,
            points,
            cameras,
            feature_maps,
            labels,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], PackError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(PackError::Truncated { section })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, s: &'static str) -> Result<u16, PackError> {
        Ok(u16::from_le_bytes(self.take(2, s)?.try_into().unwrap()))
    }

    fn u32(&mut self, s: &'static str) -> Result<u32, PackError> {
        Ok(u32::from_le_bytes(self.take(4, s)?.try_into().unwrap()))
    }

    fn f64(&mut self, s: &'static str) -> Result<f64, PackError> {
        Ok(f64::from_le_bytes(self.take(8, s)?.try_into().unwrap()))
    }
}

pub fn write_scene_pack(path: &Path, pack: &ScenePack) -> Result<(), PackError> {
    let bytes = pack.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_scene_pack(path: &Path) -> Result<ScenePack, PackError> {
    ScenePack::from_bytes(&fs::read(path)?)
}
