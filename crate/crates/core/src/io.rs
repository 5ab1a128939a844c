//! On-disk containers.
//!
//! * `OCTV1`: JSON header `{"format":"OCTV1","id":..,"shape":[N_A,N_B,R],
//!   "dtype":"f32","spacing_um":[axial,lateral,cross],"order":"a,b,r"}` and a
//!   raw little-endian `f32` payload next to it (same stem, `.raw`).
//! * `SURF1`: JSON header `{"format":"SURF1","K":..,"names":[..],
//!   "shape":[K,N_B,N_A]}` and a raw little-endian `f32` payload of 1-based
//!   row positions, row-major in `k, b, a` order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{OctError, Result};
use crate::types::{OctVolume, Spacing, SurfaceSet};

pub const VOLUME_FORMAT: &str = "OCTV1";
pub const SURFACE_FORMAT: &str = "SURF1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    #[serde(default = "volume_format")]
    pub format: String,
    pub id: String,
    pub shape: [usize; 3],
    pub dtype: String,
    pub spacing_um: [f64; 3],
    pub order: String,
}

fn volume_format() -> String {
    VOLUME_FORMAT.into()
}

fn surface_format() -> String {
    SURFACE_FORMAT.into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceHeader {
    #[serde(default = "surface_format")]
    pub format: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub names: Vec<String>,
    pub shape: [usize; 3],
}

/// Payload file belonging to a header.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| OctError::io(dir, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| OctError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| OctError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| OctError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| OctError::json(path, e))?;
    text.push('\n');
    write_bytes_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OctError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| OctError::json(path, e))
}

pub fn encode_f32_le(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

pub fn read_f32_le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| OctError::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(OctError::format(
            path,
            format!("payload holds {} bytes, header implies {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_volume(header_path: &Path, v: &OctVolume) -> Result<()> {
    let (na, nb, nr) = v.shape();
    let header = VolumeHeader {
        format: VOLUME_FORMAT.into(),
        id: v.id().to_string(),
        shape: [na, nb, nr],
        dtype: "f32".into(),
        spacing_um: v.spacing().as_array(),
        order: "a,b,r".into(),
    };
    write_bytes_atomic(&payload_path(header_path), &encode_f32_le(v.data().iter().copied()))?;
    write_json(header_path, &header)
}

pub fn read_volume(header_path: &Path) -> Result<OctVolume> {
    let h: VolumeHeader = read_json(header_path)?;
    if h.format != VOLUME_FORMAT {
        return Err(OctError::format(header_path, format!("expected format {VOLUME_FORMAT}, got {}", h.format)));
    }
    if h.dtype != "f32" {
        return Err(OctError::format(header_path, format!("unsupported dtype {}", h.dtype)));
    }
    if h.order != "a,b,r" {
        return Err(OctError::format(header_path, format!("unsupported order {}", h.order)));
    }
    let [na, nb, nr] = h.shape;
    let data = read_f32_le(&payload_path(header_path), na * nb * nr)?;
    let spacing = Spacing::from_array(h.spacing_um).map_err(|e| OctError::format(header_path, e.to_string()))?;
    OctVolume::new(h.id, na, nb, nr, data, spacing).map_err(|e| OctError::format(header_path, e.to_string()))
}

pub fn write_surfaces(header_path: &Path, s: &SurfaceSet) -> Result<()> {
    let header = SurfaceHeader {
        format: SURFACE_FORMAT.into(),
        k: s.k(),
        names: s.names().to_vec(),
        shape: [s.k(), s.n_b(), s.n_a()],
    };
    write_bytes_atomic(&payload_path(header_path), &encode_f32_le(s.positions().iter().map(|&p| p as f32)))?;
    write_json(header_path, &header)
}

pub fn read_surfaces(header_path: &Path) -> Result<SurfaceSet> {
    let h: SurfaceHeader = read_json(header_path)?;
    if h.format != SURFACE_FORMAT {
        return Err(OctError::format(header_path, format!("expected format {SURFACE_FORMAT}, got {}", h.format)));
    }
    let [k, nb, na] = h.shape;
    if k != h.k || h.names.len() != k {
        return Err(OctError::format(header_path, "K, names and shape disagree"));
    }
    let data = read_f32_le(&payload_path(header_path), k * nb * na)?;
    SurfaceSet::new(h.names, nb, na, data.into_iter().map(f64::from).collect())
        .map_err(|e| OctError::format(header_path, e.to_string()))
}
