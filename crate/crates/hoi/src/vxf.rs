//! `VXF1` field snapshots: magic, `nx ny nz` as u32, support radius as f32,
//! then all parameters as f32 (raw densities, then color logits voxel-major).
//! Everything is little-endian.

use hoi_core::field::VoxelField;

use crate::error::{format_error, Result};

const MAGIC: &[u8; 4] = b"VXF1";
const HEADER: usize = 4 + 12 + 4;

pub fn encode(field: &VoxelField) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * field.parameters().len());
    out.extend_from_slice(MAGIC);
    for n in field.resolution() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&(field.support_radius() as f32).to_le_bytes());
    for p in field.parameters() {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<VoxelField> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(format_error("not a VXF1 field snapshot"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let res = [0, 1, 2].map(|a| u32::from_le_bytes(word(4 + 4 * a)) as usize);
    let radius = f32::from_le_bytes(word(16)) as f64;
    let voxels = res.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    let expected = voxels.and_then(|v| v.checked_mul(16)).and_then(|b| b.checked_add(HEADER));
    if expected != Some(bytes.len()) {
        return Err(format_error("VXF1 size does not match its header"));
    }
    let params = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(VoxelField::from_parameters(res, radius, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_after_quantization() {
        let mut f = VoxelField::filled([3, 4, 5], 0.0, 0.0).unwrap();
        for (i, p) in f.parameters_mut().iter_mut().enumerate() {
            *p = (i as f64 * 0.731).sin() * 3.0;
        }
        f.quantize_to_f32();
        let back = decode(&encode(&f)).unwrap();
        assert_eq!(back.resolution(), [3, 4, 5]);
        assert_eq!(back.parameters(), f.parameters());
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let f = VoxelField::empty(2).unwrap();
        let bytes = encode(&f);
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(b"VXF1").is_err());
    }
}
