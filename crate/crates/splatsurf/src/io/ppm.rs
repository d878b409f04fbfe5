//! Binary portable pixmaps: P6 (RGB) and P5 (grayscale), 8-bit.
//!
//! Values map linearly between byte `u` and float `u / 255`, so a read
//! followed by a write reproduces the file byte for byte.

use std::io::{BufRead, Write};

use crate::scene::ImageBuffer;

use super::{malformed, IoError};

/// Pull one whitespace-delimited header token, skipping `#` comments.
fn next_token<R: BufRead>(r: &mut R, path: &str) -> Result<String, IoError> {
    let mut tok = Vec::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(malformed(path, 0, "unexpected end of header"));
            }
            break;
        }
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' if tok.is_empty() => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    break;
                }
            }
            _ => {
                tok.push(b);
                if tok.len() > 32 {
                    return Err(malformed(path, 0, "oversized header token"));
                }
            }
        }
    }
    String::from_utf8(tok).map_err(|_| malformed(path, 0, "non-ascii header"))
}

fn parse_dim(tok: &str, path: &str) -> Result<usize, IoError> {
    let n: usize = tok
        .parse()
        .map_err(|_| malformed(path, 0, format!("bad header number {:?}", tok)))?;
    if n == 0 || n > 1 << 16 {
        return Err(malformed(path, 0, format!("dimension {} out of range", n)));
    }
    Ok(n)
}

/// Read a P6 (3-channel) or P5 (1-channel) binary pixmap.
pub fn read_ppm<R: BufRead>(r: &mut R, path: &str) -> Result<ImageBuffer, IoError> {
    let magic = next_token(r, path)?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(malformed(path, 0, format!("not a binary pixmap: {:?}", other))),
    };
    let width = parse_dim(&next_token(r, path)?, path)?;
    let height = parse_dim(&next_token(r, path)?, path)?;
    let maxval = next_token(r, path)?;
    if maxval != "255" {
        return Err(malformed(path, 0, format!("unsupported maxval {:?}", maxval)));
    }
    // The single whitespace byte after maxval was already consumed by the
    // tokenizer; the payload starts here.
    let mut bytes = vec![0u8; width * height * channels];
    r.read_exact(&mut bytes)
        .map_err(|_| malformed(path, 0, "truncated pixel data"))?;
    let mut img = ImageBuffer::zeros(width, height, channels);
    for (dst, &b) in img.data.iter_mut().zip(&bytes) {
        *dst = b as f64 / 255.0;
    }
    Ok(img)
}

/// Write P6 for 3-channel buffers, P5 for 1-channel; values are clamped to
/// [0, 1] and rounded to bytes.
pub fn write_ppm<W: Write>(img: &ImageBuffer, out: &mut W) -> std::io::Result<()> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    write!(out, "{}\n{} {}\n255\n", magic, img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

pub fn read_ppm_file(path: &std::path::Path) -> Result<ImageBuffer, IoError> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    read_ppm(&mut r, &path.display().to_string())
}

pub fn write_ppm_file(img: &ImageBuffer, path: &std::path::Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(img, &mut out)
}
