//! Point cloud files: ASCII XYZ and the binary `PCF1` container.
//!
//! `PCF1` layout, little-endian: `b"PCF1"`, `count: u32`, then `count * 3`
//! `f32` coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

pub const PCF_MAGIC: &[u8; 4] = b"PCF1";

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "line {}: expected 3 coordinates, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            let v: f64 = f.parse().map_err(|_| {
                Error::Format(format!("line {}: invalid number {f:?}", lineno + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "line {}: non-finite coordinate",
                    lineno + 1
                )));
            }
            *slot = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Format("XYZ file contains no points".into()));
    }
    PointCloud::new(points)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        // {:?} on f64 prints the shortest representation that round-trips.
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    s
}

pub fn decode_pcf(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 8 || &bytes[..4] != PCF_MAGIC {
        return Err(Error::Format("missing PCF1 magic".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != count * 12 {
        return Err(Error::Format(format!(
            "PCF1 header declares {count} points but body has {} bytes",
            body.len()
        )));
    }
    let mut points = Vec::with_capacity(count);
    for chunk in body.chunks_exact(12) {
        let mut p = [0.0; 3];
        for (a, slot) in p.iter_mut().enumerate() {
            let v = f32::from_le_bytes(chunk[a * 4..a * 4 + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::Format("PCF1 contains a non-finite coordinate".into()));
            }
            *slot = v as f64;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Format("PCF1 file contains no points".into()));
    }
    PointCloud::new(points)
}

pub fn encode_pcf(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(PCF_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    out
}

/// Reads either format, sniffing the `PCF1` magic.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = if bytes.starts_with(PCF_MAGIC) {
        decode_pcf(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{}: not UTF-8 text or PCF1", path.display())))?;
        parse_xyz(&text)
    };
    parsed.map_err(|e| match e {
        Error::Format(m) | Error::Domain(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Writes `PCF1` when the extension is `.pcf`, XYZ text otherwise.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let binary = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pcf"));
    let bytes = if binary {
        encode_pcf(cloud)
    } else {
        format_xyz(cloud).into_bytes()
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
