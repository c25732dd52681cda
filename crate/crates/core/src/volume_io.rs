//! Two-file volume format: `<stem>.json` header plus `<stem>.raw` payload of
//! little-endian `f32` values in x-fastest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AxisConvention, Dims, Spacing, Volume3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: Dims,
    pub spacing: Spacing,
    pub dtype: String,
    pub order: String,
    pub axis0: AxisConvention,
}

impl VolumeHeader {
    pub fn for_volume(v: &Volume3) -> Self {
        Self {
            dims: v.dims(),
            spacing: v.spacing(),
            dtype: "f32".into(),
            order: "x-fastest".into(),
            axis0: v.axis_convention(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dtype != "f32" {
            return Err(Error::InvalidData(format!("unsupported dtype {:?}", self.dtype)));
        }
        if self.order != "x-fastest" {
            return Err(Error::InvalidData(format!("unsupported order {:?}", self.order)));
        }
        Ok(())
    }
}

/// Header and payload paths for a volume stem (`a/b/img` -> `a/b/img.json`, `a/b/img.raw`).
pub fn volume_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

pub fn encode_payload(v: &Volume3) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn decode_payload(header: &VolumeHeader, bytes: &[u8]) -> Result<Volume3> {
    header.validate()?;
    let n = header.dims.iter().product::<usize>();
    if bytes.len() != n * 4 {
        return Err(Error::InvalidData(format!(
            "payload has {} bytes, header dims {:?} need {}",
            bytes.len(),
            header.dims,
            n * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Volume3::new(header.dims, header.spacing, data)
}

/// Writes `<stem>.json` and `<stem>.raw`; returns the two paths.
pub fn write_volume(v: &Volume3, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let (hdr_path, raw_path) = volume_paths(stem);
    let header = serde_json::to_vec_pretty(&VolumeHeader::for_volume(v))?;
    fs::write(&hdr_path, header).map_err(|e| Error::io(&hdr_path, e))?;
    fs::write(&raw_path, encode_payload(v)).map_err(|e| Error::io(&raw_path, e))?;
    Ok((hdr_path, raw_path))
}

/// Reads a volume given either its stem or its `.json` header path.
pub fn read_volume(path: &Path) -> Result<Volume3> {
    let (hdr_path, raw_path) = volume_paths(path);
    let text = fs::read(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let header: VolumeHeader = serde_json::from_slice(&text)?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    decode_payload(&header, &bytes)
}
