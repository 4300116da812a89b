//! Framed binary protocol between the harness and an out-of-process model.
//!
//! ```text
//! handshake  FALH | u16 version                (both directions)
//! request    FALQ | u32 w | u32 h | u8 3 | w*h*3 RGB8 bytes
//! response   FALR | u32 w | u32 h | w*h f32 probabilities
//! ```
//! All integers and floats are little-endian.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::imgcore::{Image, ProbMap, CHANNELS};

pub const VERSION: u16 = 1;
pub const HANDSHAKE_MAGIC: &[u8; 4] = b"FALH";
pub const REQUEST_MAGIC: &[u8; 4] = b"FALQ";
pub const RESPONSE_MAGIC: &[u8; 4] = b"FALR";

/// Largest accepted side length, so a corrupt header cannot request a huge
/// allocation.
pub const MAX_SIDE: u32 = 1 << 15;

fn violation(message: impl Into<String>) -> Error {
    Error::Model {
        message: message.into(),
        diagnostics: String::new(),
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => violation(format!("stream closed while reading {what}")),
        _ => Error::io(format!("reading {what}"), e),
    })
}

fn expect_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let mut got = [0u8; 4];
    read_exact(r, &mut got, what)?;
    if &got != magic {
        return Err(violation(format!(
            "bad {what} magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_dims(r: &mut impl Read, what: &str) -> Result<(usize, usize)> {
    let w = read_u32(r, what)?;
    let h = read_u32(r, what)?;
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(violation(format!("{what} has unsupported size {w}x{h}")));
    }
    Ok((w as usize, h as usize))
}

fn write_all(w: &mut impl Write, bytes: &[u8], what: &str) -> Result<()> {
    w.write_all(bytes)
        .map_err(|e| Error::io(format!("writing {what}"), e))
}

fn flush(w: &mut impl Write, what: &str) -> Result<()> {
    w.flush()
        .map_err(|e| Error::io(format!("writing {what}"), e))
}

pub fn write_handshake(w: &mut impl Write, version: u16) -> Result<()> {
    let mut frame = HANDSHAKE_MAGIC.to_vec();
    frame.extend(version.to_le_bytes());
    write_all(w, &frame, "handshake")?;
    flush(w, "handshake")
}

pub fn read_handshake(r: &mut impl Read) -> Result<u16> {
    expect_magic(r, HANDSHAKE_MAGIC, "handshake")?;
    let mut b = [0u8; 2];
    read_exact(r, &mut b, "handshake")?;
    Ok(u16::from_le_bytes(b))
}

pub fn write_request(w: &mut impl Write, img: &Image) -> Result<()> {
    let mut frame = Vec::with_capacity(13 + img.data().len());
    frame.extend(REQUEST_MAGIC);
    frame.extend((img.width() as u32).to_le_bytes());
    frame.extend((img.height() as u32).to_le_bytes());
    frame.push(CHANNELS as u8);
    frame.extend(img.to_rgb8());
    write_all(w, &frame, "request")?;
    flush(w, "request")
}

/// Server side. Returns `None` on a clean end of stream before a frame.
pub fn read_request(r: &mut impl Read) -> Result<Option<Image>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut magic[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(violation("stream closed inside request magic")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::io("reading request", e)),
        }
    }
    if &magic != REQUEST_MAGIC {
        return Err(violation(format!(
            "bad request magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let (w, h) = read_dims(r, "request")?;
    let mut ch = [0u8; 1];
    read_exact(r, &mut ch, "request")?;
    if ch[0] as usize != CHANNELS {
        return Err(violation(format!(
            "request has {} channels, expected 3",
            ch[0]
        )));
    }
    let mut bytes = vec![0u8; w * h * CHANNELS];
    read_exact(r, &mut bytes, "request raster")?;
    Image::from_rgb8(w, h, &bytes).map(Some)
}

pub fn write_response(w: &mut impl Write, map: &ProbMap) -> Result<()> {
    let mut frame = Vec::with_capacity(12 + map.data().len() * 4);
    frame.extend(RESPONSE_MAGIC);
    frame.extend((map.width() as u32).to_le_bytes());
    frame.extend((map.height() as u32).to_le_bytes());
    for v in map.data() {
        frame.extend(v.to_le_bytes());
    }
    write_all(w, &frame, "response")?;
    flush(w, "response")
}

pub fn read_response(r: &mut impl Read) -> Result<ProbMap> {
    expect_magic(r, RESPONSE_MAGIC, "response")?;
    let (w, h) = read_dims(r, "response")?;
    let mut bytes = vec![0u8; w * h * 4];
    read_exact(r, &mut bytes, "response values")?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ProbMap::new(w, h, data).map_err(|e| violation(format!("invalid response: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frames_roundtrip_with_exact_layout() {
        let img = Image::from_rgb8(2, 1, &[1, 2, 3, 4, 5, 6]).unwrap();
        let mut buf = Vec::new();
        write_request(&mut buf, &img).unwrap();
        assert_eq!(&buf[..13], b"FALQ\x02\0\0\0\x01\0\0\0\x03");
        assert_eq!(&buf[13..], &[1, 2, 3, 4, 5, 6]);
        let mut cur = Cursor::new(buf);
        assert_eq!(read_request(&mut cur).unwrap().unwrap(), img);
        assert!(read_request(&mut cur).unwrap().is_none());

        let map = ProbMap::new(2, 1, vec![0.25, 1.0]).unwrap();
        let mut buf = Vec::new();
        write_response(&mut buf, &map).unwrap();
        assert_eq!(&buf[..12], b"FALR\x02\0\0\0\x01\0\0\0");
        assert_eq!(&buf[12..16], &0.25f32.to_le_bytes());
        assert_eq!(read_response(&mut Cursor::new(buf)).unwrap(), map);

        let mut buf = Vec::new();
        write_handshake(&mut buf, VERSION).unwrap();
        assert_eq!(buf, b"FALH\x01\0");
        assert_eq!(read_handshake(&mut Cursor::new(buf)).unwrap(), 1);
    }

    #[test]
    fn violations_are_reported() {
        let bad = [
            b"FALX\x01\0\0\0\x01\0\0\0".to_vec(),
            b"FALR\x01\0\0\0\x01\0\0\0".to_vec(),
            b"FALR\0\0\0\0\x01\0\0\0".to_vec(),
            [
                b"FALR\x01\0\0\0\x01\0\0\0".as_slice(),
                &2.0f32.to_le_bytes(),
            ]
            .concat(),
        ];
        for b in bad {
            assert!(matches!(
                read_response(&mut Cursor::new(b)),
                Err(Error::Model { .. })
            ));
        }
        let req = b"FALQ\x01\0\0\0\x01\0\0\0\x04abcd".to_vec();
        assert!(read_request(&mut Cursor::new(req)).is_err());
        assert!(read_request(&mut Cursor::new(b"FA".to_vec())).is_err());
    }
}
