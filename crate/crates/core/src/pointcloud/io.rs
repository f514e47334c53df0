//! Point-cloud files.
//!
//! Two encodings are accepted by [`load_pointcloud`]:
//!
//! * text: a header line `PCD1 <N>` followed by `N` lines of three decimal floats;
//! * binary: the 8-byte magic `GIDPPC01`, a little-endian `u32` point count and
//!   `3·N` little-endian `f32` values with x, y, z interleaved.
//!
//! The binary encoding is canonical.

use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 8] = b"GIDPPC01";
pub const TEXT_MAGIC: &str = "PCD1";

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        decode_binary(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::MalformedHeader("neither binary magic nor utf-8 text".into()))?;
        decode_text(text)
    }
}

/// Writes the canonical binary encoding. Coordinates are stored as `f32`.
pub fn save_pointcloud(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_binary(pc)).map_err(|e| Error::io(path, e))
}

pub fn save_pointcloud_text(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{TEXT_MAGIC} {}\n", pc.len());
    for p in pc.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_binary(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 12 * pc.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    for p in pc.points() {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode_binary(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < 12 {
        return Err(Error::MalformedHeader("binary header shorter than 12 bytes".into()));
    }
    let declared = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() % 12 != 0 {
        return Err(Error::MalformedHeader(format!(
            "binary body of {} bytes is not a whole number of points",
            body.len()
        )));
    }
    let found = body.len() / 12;
    if found != declared {
        return Err(Error::PointCountMismatch { declared, found });
    }
    let points = body
        .chunks_exact(12)
        .map(|rec| {
            let c = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            [c(0), c(1), c(2)]
        })
        .collect();
    PointCloud::new(points)
}

pub(crate) fn decode_text(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(TEXT_MAGIC) {
        return Err(Error::MalformedHeader(format!("expected `{TEXT_MAGIC} <N>`, got `{header}`")));
    }
    let declared: usize = fields
        .next()
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("bad point count in `{header}`")))?;
    if fields.next().is_some() {
        return Err(Error::MalformedHeader(format!("trailing fields in `{header}`")));
    }

    let mut points = Vec::with_capacity(declared);
    for (i, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedHeader(format!("record {i}: {e}")))?;
        if vals.len() != 3 {
            return Err(Error::MalformedHeader(format!(
                "record {i} has {} values, expected 3",
                vals.len()
            )));
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    if points.len() != declared {
        return Err(Error::PointCountMismatch {
            declared,
            found: points.len(),
        });
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_origin_point_text() {
        let pc = decode_text("PCD1 1\n0 0 0\n").unwrap();
        assert_eq!(pc.points(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn short_text_body_is_count_mismatch() {
        let mut text = String::from("PCD1 4096\n");
        for i in 0..4095 {
            text.push_str(&format!("{i} 0 1\n"));
        }
        let err = decode_text(&text).unwrap_err();
        assert!(matches!(
            err,
            Error::PointCountMismatch {
                declared: 4096,
                found: 4095
            }
        ));
        assert!(err.to_string().contains("point count mismatch"));
    }

    #[test]
    fn short_binary_body_is_count_mismatch() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]).unwrap();
        let mut bytes = encode_binary(&pc);
        bytes[8..12].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            decode_binary(&bytes),
            Err(Error::PointCountMismatch {
                declared: 5,
                found: 4
            })
        ));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_text("PCD2 1\n0 0 0\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_text("PCD1 x\n"), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_text(""), Err(Error::MalformedHeader(_))));
        assert!(matches!(decode_binary(b"GIDPPC01\x01"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn non_finite_values_rejected() {
        assert!(matches!(decode_text("PCD1 1\n0 nan 0\n"), Err(Error::NonFinite(_))));
        let mut bytes = BINARY_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for v in [0.0f32, f32::INFINITY, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_binary(&bytes), Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            load_pointcloud("/nonexistent/cloud.bin"),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn binary_and_text_round_trip(pts in prop::collection::vec(prop::array::uniform3(-1.0e3f32..1.0e3), 1..64)) {
            let pc = PointCloud::new(pts.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let bin = dir.path().join("a.bin");
            let txt = dir.path().join("a.txt");
            save_pointcloud(&pc, &bin).unwrap();
            save_pointcloud_text(&pc, &txt).unwrap();
            prop_assert_eq!(&load_pointcloud(&bin).unwrap(), &pc);
            prop_assert_eq!(&load_pointcloud(&txt).unwrap(), &pc);
        }
    }
}
