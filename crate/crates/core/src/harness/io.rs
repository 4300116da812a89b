//! On-disk formats: binary PPM images, run-length encoded mask text, and
//! the dataset manifest CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image, Mask};

fn format_err(kind: &'static str, path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        kind,
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Decodes a binary PPM (`P6`, maxval 255). `path` is only used in errors.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let err = |off: usize, msg: &str| format_err("PPM", path, off, msg);
    let mut pos = 0usize;

    // Header tokens are separated by whitespace; `#` starts a comment.
    let token = |pos: &mut usize| -> Result<(usize, String)> {
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(*pos, "unexpected end of header")),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok((
            start,
            String::from_utf8_lossy(&bytes[start..*pos]).into_owned(),
        ))
    };

    let (off, magic) = token(&mut pos)?;
    if magic != "P6" {
        return Err(err(off, "expected magic `P6`"));
    }
    let number = |pos: &mut usize, what: &str| -> Result<(usize, usize)> {
        let (off, t) = token(pos)?;
        let v = t
            .parse::<usize>()
            .map_err(|_| err(off, &format!("invalid {what} `{t}`")))?;
        Ok((off, v))
    };
    let (_, width) = number(&mut pos, "width")?;
    let (_, height) = number(&mut pos, "height")?;
    let (maxval_at, maxval) = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(err(maxval_at, "only maxval 255 is supported"));
    }
    if width == 0 || height == 0 {
        return Err(err(0, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "missing whitespace after maxval")),
    }
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(err(
            bytes.len(),
            &format!("raster truncated: need {need} bytes, have {}", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(err(pos + need, "trailing bytes after raster"));
    }
    Image::from_rgb8(width, height, raster)
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_rgb8());
    out
}

/// Encodes a mask as text: `width height` then one `start length` line per
/// run of set bits (row-major flat indices).
pub fn encode_rle(mask: &Mask) -> String {
    let mut out = format!("{} {}\n", mask.width(), mask.height());
    let data = mask.data();
    let mut i = 0;
    while i < data.len() {
        if data[i] {
            let start = i;
            while i < data.len() && data[i] {
                i += 1;
            }
            out.push_str(&format!("{} {}\n", start, i - start));
        } else {
            i += 1;
        }
    }
    out
}

pub fn decode_rle(text: &str, path: &Path) -> Result<Mask> {
    let err = |off: usize, msg: String| format_err("RLE", path, off, msg);
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let at = offset;
        offset += l.len();
        (at, l.trim())
    });
    let (w, h) = loop {
        let Some((at, line)) = lines.next() else {
            return Err(err(0, "missing `width height` header".into()));
        };
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_ascii_whitespace();
        let dims = (
            parts.next().and_then(|t| t.parse::<usize>().ok()),
            parts.next().and_then(|t| t.parse::<usize>().ok()),
        );
        match (dims, parts.next()) {
            ((Some(w), Some(h)), None) => break (w, h),
            _ => return Err(err(at, format!("invalid header `{line}`"))),
        }
    };
    let n = w * h;
    let mut data = vec![false; n];
    let mut next_free = 0usize;
    for (at, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_ascii_whitespace();
        let run = (
            parts.next().and_then(|t| t.parse::<usize>().ok()),
            parts.next().and_then(|t| t.parse::<usize>().ok()),
        );
        let (start, len) = match (run, parts.next()) {
            ((Some(s), Some(l)), None) => (s, l),
            _ => return Err(err(at, format!("invalid run `{line}`"))),
        };
        if len == 0 {
            return Err(err(at, "zero-length run".into()));
        }
        if start < next_free {
            return Err(err(at, "runs must be ascending and non-overlapping".into()));
        }
        let end = start
            .checked_add(len)
            .filter(|&e| e <= n)
            .ok_or_else(|| err(at, format!("run {start}+{len} exceeds {n} pixels")))?;
        data[start..end].fill(true);
        next_free = end;
    }
    Mask::new(w, h, data)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_ppm(&bytes, path)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    fs::write(path, encode_ppm(img))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_rle(path: &Path) -> Result<Mask> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_rle(&text, path)
}

pub fn write_rle(path: &Path, mask: &Mask) -> Result<()> {
    fs::write(path, encode_rle(mask))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "image_path", "mask_path"] {
        return Err(format_err(
            "manifest",
            path,
            0,
            "header must be `image_id,image_path,mask_path`",
        ));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `contents` to `path`, creating parent directories.
pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(contents.as_ref())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
