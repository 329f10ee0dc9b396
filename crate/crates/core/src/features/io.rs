//! `DFMP` feature-map interchange file.
//!
//! Little-endian, no padding:
//!
//! ```text
//! b"DFMP"  u8 version (= 1)
//! u32 source_w, source_h, stride, grid_w, grid_h, descriptor_dim
//! f32 detector logits   grid_h * grid_w * 2   (cell-major, vessel then background)
//! f32 descriptors       grid_h * grid_w * dim (cell-major, dimension-minor)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::DenseFeatureMap;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DFMP";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 6 * 4;

pub fn write_feature_map(fm: &DenseFeatureMap, mut w: impl Write) -> std::io::Result<()> {
    let mut buf =
        Vec::with_capacity(HEADER_LEN + 4 * (fm.detector_logits().len() + fm.descriptors().len()));
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for v in [
        fm.source_w(),
        fm.source_h(),
        fm.stride(),
        fm.grid_w(),
        fm.grid_h(),
        fm.descriptor_dim(),
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in fm.detector_logits().iter().chain(fm.descriptors()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn save_feature_map(fm: &DenseFeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_feature_map(fm, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Parses a complete `DFMP` byte image.
pub fn read_feature_map(bytes: &[u8]) -> Result<DenseFeatureMap> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file holds {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let mut fields = [0usize; 6];
    for (i, f) in fields.iter_mut().enumerate() {
        let o = 5 + 4 * i;
        *f = u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    }
    let [source_w, source_h, stride, grid_w, grid_h, dim] = fields;
    if stride == 0 || grid_w != source_w.div_ceil(stride) || grid_h != source_h.div_ceil(stride) {
        return Err(Error::Format(format!(
            "grid {grid_w}x{grid_h} inconsistent with source {source_w}x{source_h} at stride {stride}"
        )));
    }
    let cells = grid_w
        .checked_mul(grid_h)
        .ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let n_logits = cells * 2;
    let n_desc = cells
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("descriptor payload size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = 4 * (n_logits + n_desc);
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header declares {} floats ({n_logits} logits + {n_desc} descriptor values) \
             but the payload holds {} bytes",
            n_logits + n_desc,
            payload.len()
        )));
    }
    let logits = read_f32s(&payload[..4 * n_logits]);
    let descs = read_f32s(&payload[4 * n_logits..]);
    DenseFeatureMap::new(source_w, source_h, stride, dim, logits, descs)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn load_feature_map(path: impl AsRef<Path>) -> Result<DenseFeatureMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_feature_map(&bytes)
}

/// Whether `bytes` start with the interchange magic.
pub fn has_magic(bytes: &[u8]) -> bool {
    bytes.len() >= 4 && &bytes[..4] == MAGIC
}
