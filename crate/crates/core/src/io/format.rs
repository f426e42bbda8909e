//! Binary point cloud files.
//!
//! Layout (all little-endian):
//!
//! | bytes      | content                                         |
//! |------------|-------------------------------------------------|
//! | 4          | magic `DSPC`                                    |
//! | 2          | version (`u16`, currently 1)                    |
//! | 1          | arity: 4 (x, y, z, r) or 5 (x, y, z, r, s)      |
//! | 1          | flags: bit 0 set when beam indices follow       |
//! | 8          | point count N (`u64`)                           |
//! | N·arity·4  | `f32` records                                   |
//! | N·2        | `u16` beam indices, only with flag bit 0        |
//!
//! Values are stored as `f32`; clouds read from a file round-trip exactly.

use std::fs;
use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::scene::PointCloud;

pub const MAGIC: &[u8; 4] = b"DSPC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const FLAG_BEAMS: u8 = 1;

/// Serializes a cloud. Coordinates are narrowed to `f32`.
pub fn cloud_to_bytes(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let arity = cloud.arity();
    let flags = if cloud.beams().is_some() { FLAG_BEAMS } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + n * (arity as usize * 4 + 2));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(arity);
    out.push(flags);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        let p = &cloud.positions()[i];
        let mut rec = vec![p.x, p.y, p.z, cloud.reflectance()[i]];
        if let Some(s) = cloud.semantic() {
            rec.push(if s[i] { 1.0 } else { 0.0 });
        }
        for v in rec {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(beams) = cloud.beams() {
        for b in beams {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

/// Parses a cloud; `path` only labels errors.
pub fn cloud_from_bytes(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let bad = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let arity = bytes[6];
    if arity != 4 && arity != 5 {
        return Err(bad(format!("arity must be 4 or 5, got {arity}")));
    }
    let flags = bytes[7];
    if flags & !FLAG_BEAMS != 0 {
        return Err(bad(format!("unknown flags {flags:#04x}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rec_len = arity as usize * 4;
    let beam_len = if flags & FLAG_BEAMS != 0 { 2 } else { 0 };
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(rec_len + beam_len))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| bad(format!("point count {n} is too large")))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {n} points of arity {arity}, found {}",
            bytes.len()
        )));
    }
    let n = n as usize;
    let f = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as f64;

    let mut positions = Vec::with_capacity(n);
    let mut reflectance = Vec::with_capacity(n);
    let mut semantic = Vec::with_capacity(if arity == 5 { n } else { 0 });
    for i in 0..n {
        let base = HEADER_LEN + i * rec_len;
        positions.push(Point3::new(f(base), f(base + 4), f(base + 8)));
        reflectance.push(f(base + 12));
        if arity == 5 {
            match f(base + 16) {
                0.0 => semantic.push(false),
                1.0 => semantic.push(true),
                s => return Err(bad(format!("point {i}: semantic value {s} is not 0 or 1"))),
            }
        }
    }
    let mut cloud = PointCloud::new(positions, reflectance).map_err(|e| bad(e.to_string()))?;
    if arity == 5 {
        cloud = cloud.with_semantic(semantic)?;
    }
    if beam_len > 0 {
        let start = HEADER_LEN + n * rec_len;
        let beams = bytes[start..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        cloud = cloud.with_beams(beams)?;
    }
    Ok(cloud)
}

pub fn write_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, cloud_to_bytes(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    cloud_from_bytes(&bytes, path)
}
