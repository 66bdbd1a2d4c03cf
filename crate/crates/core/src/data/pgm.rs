use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Array;

/// `[−1, 1]` → `0..=255`, clamping first.
pub fn to_pixel(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_pixel(p: u8, maxval: u16) -> f32 {
    p as f32 / maxval as f32 * 2.0 - 1.0
}

/// Binary `P5` bytes for a `1×H×W` (or `H×W`) image in `[−1, 1]`.
pub fn encode_pgm(image: &Array<f32>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::Input(format!("PGM holds one channel, got shape {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data.iter().map(|&v| to_pixel(v)));
    Ok(out)
}

/// Parse `P5` bytes into a `1×H×W` array in `[−1, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Array<f32>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if fields[0] != "P5" {
        return Err(format!("unsupported magic `{}`", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(format!("unsupported geometry {w}x{h} maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or("truncated raster")?;
    Ok(Array {
        shape: vec![1, h, w],
        data: raster.iter().map(|&p| from_pixel(p, maxval as u16)).collect(),
    })
}

pub fn read_pgm(path: &Path) -> Result<Array<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    decode_pgm(&bytes).map_err(|msg| Error::Ingestion {
        file: path.to_path_buf(),
        msg,
    })
}

pub fn write_pgm(path: &Path, image: &Array<f32>) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}
