//! KITTI velodyne binary point clouds: 16 bytes per point, four
//! little-endian f32 values in x, y, z, intensity order.

use crate::error::{Error, Result};
use crate::pillars::PointCloud;
use std::path::Path;

pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!(
            "point file length not divisible by 16: {} bytes",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (idx, chunk) in bytes.chunks_exact(16).enumerate() {
        let mut p = [0f32; 4];
        for (k, slot) in p.iter_mut().enumerate() {
            *slot = f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {idx}")));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn read_kitti_bin(path: &Path) -> Result<PointCloud> {
    decode_points(&std::fs::read(path)?)
}

/// Inverse encoder; round-trips [`decode_points`] byte for byte.
pub fn encode_points(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for p in &pc.points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_points_bin(pc: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, encode_points(pc))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_known_points() {
        let pts = [[1.0f32, 2.0, 3.0, 0.5], [-4.0, 0.25, -1.5, 1.0]];
        let mut bytes = Vec::new();
        for p in &pts {
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let pc = decode_points(&bytes).unwrap();
        assert_eq!(pc.points, pts.to_vec());
    }

    #[test]
    fn empty_file() {
        assert_eq!(decode_points(&[]).unwrap().len(), 0);
    }

    #[test]
    fn length_not_divisible() {
        let err = decode_points(&[0u8; 17]).unwrap_err().to_string();
        assert!(err.contains("not divisible by 16"), "{err}");
        assert!(err.contains("17"), "{err}");
    }

    #[test]
    fn non_finite_point_named() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in [1.0f32, f32::NAN, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let err = decode_points(&bytes).unwrap_err().to_string();
        assert!(err.contains("point 1"), "{err}");
    }

    #[test]
    fn round_trip() {
        let pc = PointCloud {
            points: vec![[0.1, -0.2, 0.3, 0.9], [5.0, 6.0, 7.0, 0.0]],
        };
        let bytes = encode_points(&pc);
        let back = decode_points(&bytes).unwrap();
        assert_eq!(pc, back);
        assert_eq!(bytes, encode_points(&back));
    }
}
