//! Minimal binary netpbm support: 8-bit grayscale PGM (P5) and 8-bit RGB
//! PPM (P6).
//!
//! Only the subset needed for exporting energy landscapes and filter tilings
//! is implemented: maxval is fixed at 255 and pixels are written raw. The
//! readers exist so round trips can be checked in tests and downstream
//! tooling; they tolerate arbitrary whitespace and `#` comments in the
//! header, as the format allows.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetpbmError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("only maxval 255 is supported (found {0})")]
    UnsupportedMaxval(u64),
    #[error("pixel payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

/// Writes an 8-bit grayscale image as binary PGM (P5).
///
/// `pixels` is row-major, top row first, `width * height` bytes.
pub fn write_pgm<W: io::Write>(
    w: &mut W,
    width: usize,
    height: usize,
    pixels: &[u8],
) -> io::Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel buffer size mismatch");
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)
}

/// Writes an 8-bit RGB image as binary PPM (P6).
///
/// `pixels` is row-major with interleaved channels (RGBRGB...), top row
/// first, `width * height * 3` bytes.
pub fn write_ppm<W: io::Write>(
    w: &mut W,
    width: usize,
    height: usize,
    pixels: &[u8],
) -> io::Result<()> {
    assert_eq!(pixels.len(), width * height * 3, "pixel buffer size mismatch");
    write!(w, "P6\n{width} {height}\n255\n")?;
    w.write_all(pixels)
}

/// A decoded netpbm image: `channels` is 1 for PGM, 3 for PPM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn read_pgm(bytes: &[u8]) -> Result<Image, NetpbmError> {
    read_raster(bytes, "P5", 1)
}

pub fn read_ppm(bytes: &[u8]) -> Result<Image, NetpbmError> {
    read_raster(bytes, "P6", 3)
}

fn read_raster(bytes: &[u8], magic: &'static str, channels: usize) -> Result<Image, NetpbmError> {
    let mut pos = 0usize;
    let found = read_token(bytes, &mut pos)
        .ok_or_else(|| NetpbmError::BadHeader("missing magic".into()))?;
    if found != magic.as_bytes() {
        return Err(NetpbmError::BadMagic {
            expected: magic,
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let width = read_number(bytes, &mut pos, "width")?;
    let height = read_number(bytes, &mut pos, "height")?;
    let maxval = read_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(NetpbmError::UnsupportedMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(NetpbmError::BadHeader(
            "missing whitespace before raster".into(),
        ));
    }
    pos += 1;
    let width = usize::try_from(width)
        .map_err(|_| NetpbmError::BadHeader("width out of range".into()))?;
    let height = usize::try_from(height)
        .map_err(|_| NetpbmError::BadHeader("height out of range".into()))?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| NetpbmError::BadHeader("image dimensions overflow".into()))?;
    let rest = &bytes[pos..];
    if rest.len() < expected {
        return Err(NetpbmError::Truncated {
            expected,
            found: rest.len(),
        });
    }
    Ok(Image {
        width,
        height,
        channels,
        pixels: rest[..expected].to_vec(),
    })
}

/// Advances past whitespace and `#` comments, then returns the next token.
fn read_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn read_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u64, NetpbmError> {
    let tok = read_token(bytes, pos)
        .ok_or_else(|| NetpbmError::BadHeader(format!("missing {what}")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| NetpbmError::BadHeader(format!("unparseable {what}")))
}
