//! `TSACAP01` binary feature files: 8-byte magic, little-endian `u32` frame
//! count and vertex count, then frame-major, vertex-major `f64` 9-vectors.

use std::fs;
use std::path::Path;

use super::{FeatureFrame, FeatureSequence, FEATURE_DIM};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"TSACAP01";

pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let frames = u32::try_from(seq.frame_count()).map_err(|_| Error::Format("too many frames".into()))?;
    let verts = u32::try_from(seq.vertex_count).map_err(|_| Error::Format("too many vertices".into()))?;
    let mut out = Vec::with_capacity(16 + seq.frame_count() * seq.vertex_count * FEATURE_DIM * 8);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&verts.to_le_bytes());
    for frame in &seq.frames {
        for x in frame.as_flat() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::Format("missing TSACAP01 header".into()));
    }
    let frames = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let verts = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let per_frame = verts * FEATURE_DIM * 8;
    let expected = frames
        .checked_mul(per_frame)
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} bytes for {frames} frames of {verts} vertices, found {}",
            bytes.len()
        )));
    }
    if per_frame == 0 {
        return FeatureSequence::new(0, vec![FeatureFrame { vectors: Vec::new() }; frames]);
    }
    let frames = bytes[16..]
        .chunks_exact(per_frame)
        .map(|chunk| {
            let values: Vec<f64> = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            FeatureFrame::from_flat(&values)
        })
        .collect::<Result<Vec<_>>>()?;
    FeatureSequence::new(verts, frames)
}

pub fn write_features(path: impl AsRef<Path>, seq: &FeatureSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(seq)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    decode_features(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
