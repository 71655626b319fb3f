//! Length-prefixed frame format for the local-socket data plane.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [frame length: u64]            bytes that follow the length field
//! [msg kind: 1 byte]             1 = tensor data, 2 = failure marker,
//!                                3 = timing metadata
//! [tag: u64]
//! [shape rank: u64][dim: u64]*   rank then one word per dimension
//! [body: f64 little-endian]*     raw scalars, shape product of them
//! ```
//!
//! Failure markers have rank 0 and an empty body. Timing metadata frames
//! carry a single f64 (the sender's virtual timestamp) as a rank-1 [1]
//! tensor and always precede the data frame with the same tag.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const KIND_DATA: u8 = 1;
pub const KIND_FAILURE: u8 = 2;
pub const KIND_TIMING: u8 = 3;

/// One decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub kind: u8,
    pub tag: u64,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Frame {
    pub fn data(tag: u64, shape: Vec<usize>, values: Vec<f64>) -> Frame {
        Frame {
            kind: KIND_DATA,
            tag,
            shape,
            values,
        }
    }

    pub fn failure(tag: u64) -> Frame {
        Frame {
            kind: KIND_FAILURE,
            tag,
            shape: vec![],
            values: vec![],
        }
    }

    pub fn timing(tag: u64, vt: f64) -> Frame {
        Frame {
            kind: KIND_TIMING,
            tag,
            shape: vec![1],
            values: vec![vt],
        }
    }
}

/// Serialize a frame, including its length prefix.
pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let body_len = 1 + 8 + 8 + frame.shape.len() * 8 + frame.values.len() * 8;
    let mut out = Vec::with_capacity(8 + body_len);
    out.extend_from_slice(&(body_len as u64).to_le_bytes());
    out.push(frame.kind);
    out.extend_from_slice(&frame.tag.to_le_bytes());
    out.extend_from_slice(&(frame.shape.len() as u64).to_le_bytes());
    for &d in &frame.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &frame.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&encode_frame(frame))?;
    Ok(())
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut len_buf = [0u8; 8];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u64::from_le_bytes(len_buf) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    decode_body(&buf).map(Some)
}

fn decode_body(buf: &[u8]) -> Result<Frame> {
    let too_short = || Error::Protocol("frame shorter than its header".into());
    if buf.len() < 17 {
        return Err(too_short());
    }
    let kind = buf[0];
    let tag = u64::from_le_bytes(buf[1..9].try_into().unwrap());
    let rank = u64::from_le_bytes(buf[9..17].try_into().unwrap()) as usize;
    let mut off = 17;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if buf.len() < off + 8 {
            return Err(too_short());
        }
        shape.push(u64::from_le_bytes(buf[off..off + 8].try_into().unwrap()) as usize);
        off += 8;
    }
    let expect: usize = if rank == 0 { 0 } else { shape.iter().product() };
    if buf.len() != off + expect * 8 {
        return Err(Error::Protocol(format!(
            "frame body is {} bytes, shape {:?} implies {}",
            buf.len() - off,
            shape,
            expect * 8
        )));
    }
    let values = buf[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Frame {
        kind,
        tag,
        shape,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_bytes_for_a_small_data_frame() {
        let frame = Frame::data(5, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = encode_frame(&frame);
        // length field: 1 + 8 + 8 + 16 + 32 = 65 bytes after the prefix
        assert_eq!(bytes.len(), 8 + 65);
        assert_eq!(&bytes[0..8], &65u64.to_le_bytes());
        assert_eq!(bytes[8], KIND_DATA);
        assert_eq!(&bytes[9..17], &5u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &2u64.to_le_bytes()); // rank
        assert_eq!(&bytes[25..33], &2u64.to_le_bytes()); // dim 0
        assert_eq!(&bytes[33..41], &2u64.to_le_bytes()); // dim 1
        assert_eq!(&bytes[41..49], &1.0f64.to_le_bytes());
    }

    #[test]
    fn round_trip_over_a_byte_stream() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut stream = Vec::new();
        let mut frames = Vec::new();
        for tag in 0..20u64 {
            let rank = rng.gen_range(1..4usize);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..4)).collect();
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let f = Frame::data(tag, shape, values);
            stream.extend_from_slice(&encode_frame(&f));
            frames.push(f);
        }
        stream.extend_from_slice(&encode_frame(&Frame::failure(99)));
        stream.extend_from_slice(&encode_frame(&Frame::timing(100, 2.5)));

        let mut cursor = std::io::Cursor::new(stream);
        for f in &frames {
            let got = read_frame(&mut cursor).unwrap().unwrap();
            assert_eq!(&got, f);
        }
        let fail = read_frame(&mut cursor).unwrap().unwrap();
        assert_eq!(fail.kind, KIND_FAILURE);
        assert_eq!(fail.tag, 99);
        assert!(fail.shape.is_empty());
        let timing = read_frame(&mut cursor).unwrap().unwrap();
        assert_eq!(timing.kind, KIND_TIMING);
        assert_eq!(timing.values, vec![2.5]);
        assert!(read_frame(&mut cursor).unwrap().is_none());
    }

    #[test]
    fn truncated_frame_is_rejected() {
        let frame = Frame::data(1, vec![2], vec![1.0, 2.0]);
        let mut bytes = encode_frame(&frame);
        bytes.truncate(bytes.len() - 4);
        let mut cursor = std::io::Cursor::new(bytes);
        assert!(read_frame(&mut cursor).is_err());
    }

    #[test]
    fn shape_body_mismatch_is_rejected() {
        let frame = Frame::data(1, vec![3], vec![1.0, 2.0]);
        // hand-corrupt: claim shape [3] but carry 2 scalars
        let mut out = Vec::new();
        let body_len = 1 + 8 + 8 + 8 + 16;
        out.extend_from_slice(&(body_len as u64).to_le_bytes());
        out.push(frame.kind);
        out.extend_from_slice(&frame.tag.to_le_bytes());
        out.extend_from_slice(&1u64.to_le_bytes());
        out.extend_from_slice(&3u64.to_le_bytes());
        for v in &frame.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut cursor = std::io::Cursor::new(out);
        assert!(read_frame(&mut cursor).is_err());
    }
}
