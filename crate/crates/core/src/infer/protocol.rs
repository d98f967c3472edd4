//! Binary stream messages. Integers and floats are little-endian.

use super::rle::{decode_rle, encode_rle};
use super::CROP;
use crate::error::{Error, Result};
use crate::mask::Mask;

/// Client to server: sequence (u64), timestamp in ms (u64), encoded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePacket {
    pub sequence: u64,
    pub timestamp_ms: u64,
    pub frame: Vec<u8>,
}

impl FramePacket {
    pub const HEADER: usize = 16;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER + self.frame.len());
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&self.frame);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() <= Self::HEADER {
            return Err(Error::Contract(format!("frame packet of {} bytes has no image payload", bytes.len())));
        }
        Ok(Self {
            sequence: u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")),
            timestamp_ms: u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")),
            frame: bytes[16..].to_vec(),
        })
    }
}

/// Server to client: sequence (u64), inference time in ms (f32) and the
/// run-length encoded 224x224 mask as u16 runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPacket {
    pub sequence: u64,
    pub inference_ms: f32,
    pub runs: Vec<u16>,
}

impl MaskPacket {
    pub const HEADER: usize = 12;

    pub fn new(sequence: u64, inference_ms: f32, mask: &Mask) -> Result<Self> {
        if mask.width() != CROP || mask.height() != CROP {
            return Err(Error::Contract(format!("mask packets carry {CROP}x{CROP} masks")));
        }
        Ok(Self { sequence, inference_ms, runs: encode_rle(mask) })
    }

    pub fn mask(&self) -> Result<Mask> {
        decode_rle(&self.runs, CROP, CROP)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::HEADER + 2 * self.runs.len());
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&self.inference_ms.to_le_bytes());
        for r in &self.runs {
            out.extend_from_slice(&r.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::HEADER || (bytes.len() - Self::HEADER) % 2 != 0 {
            return Err(Error::Contract(format!("mask packet of {} bytes is malformed", bytes.len())));
        }
        let runs = bytes[Self::HEADER..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let p = Self {
            sequence: u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")),
            inference_ms: f32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")),
            runs,
        };
        p.mask()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let p = FramePacket { sequence: 7, timestamp_ms: 1_700_000_000_123, frame: vec![1, 2, 3] };
        let bytes = p.encode();
        assert_eq!(&bytes[..8], &7u64.to_le_bytes());
        assert_eq!(FramePacket::decode(&bytes).unwrap(), p);
        assert!(FramePacket::decode(&bytes[..16]).is_err());
    }

    #[test]
    fn mask_round_trip() {
        let m = Mask::from_fn(CROP, CROP, |x, y| (x / 7 + y / 5) % 3 == 0);
        let p = MaskPacket::new(3, 12.5, &m).unwrap();
        let back = MaskPacket::decode(&p.encode()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.mask().unwrap(), m);
    }

    #[test]
    fn truncated_mask_packet_is_rejected() {
        let p = MaskPacket::new(1, 1.0, &Mask::zeros(CROP, CROP)).unwrap();
        let bytes = p.encode();
        assert!(MaskPacket::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(MaskPacket::decode(&bytes[..12]).is_err());
    }
}
