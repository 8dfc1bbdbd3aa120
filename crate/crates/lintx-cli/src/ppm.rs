//! Binary PPM (P6, maxval 255) image I/O and grayscale region masks.
//!
//! P6 with an 8-bit range is the one mandatory format: bytes map to [0,1]
//! by an exact /255 on read, and writes clamp then round half-up, so
//! read(write(x)) reproduces the quantized image bit for bit. Everything
//! else (ASCII P3, 16-bit payloads, PGM) is refused up front rather than
//! approximated.

use crate::Fail;
use lintx_core::tensor::Tensor;
use lintx_core::transfer::RegionMask;
use std::path::Path;

const MAX_SIDE: usize = 1 << 16;
const MAX_PIXELS: usize = 1 << 26;

/// Quantization used on write: clamp to [0,1], scale, round half-up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

struct Header {
    width: usize,
    height: usize,
    offset: usize,
}

/// Parses "P6 <w> <h> 255" plus the single whitespace byte that ends the
/// header. Netpbm `#` comments are honored.
fn parse_header(bytes: &[u8], path: &Path) -> Result<Header, Fail> {
    let bad = |what: &str| Fail::Io(format!("{}: {what}", path.display()));
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> Result<Vec<u8>, Fail> {
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
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("malformed PPM header"));
        }
        Ok(bytes[start..*pos].to_vec())
    };

    let magic = token(&mut pos)?;
    if magic != b"P6" {
        return Err(bad("unsupported PPM variant"));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize, Fail> {
        let t = token(pos)?;
        std::str::from_utf8(&t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| bad(&format!("malformed PPM header ({what})")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(bad("unsupported PPM variant"));
    }
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(bad("malformed PPM header (bad extents)"));
    }
    if width * height > MAX_PIXELS {
        return Err(bad("malformed PPM header (image too large)"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("malformed PPM header"));
    }
    pos += 1;
    Ok(Header { width, height, offset: pos })
}

fn read_payload(path: &Path) -> Result<(Header, Vec<u8>), Fail> {
    let bytes = std::fs::read(path)
        .map_err(|e| Fail::Io(format!("{}: {e}", path.display())))?;
    let header = parse_header(&bytes, path)?;
    let need = header.offset + 3 * header.width * header.height;
    if bytes.len() < need {
        return Err(Fail::Io(format!("{}: truncated PPM payload", path.display())));
    }
    Ok((header, bytes))
}

/// Reads a P6 image into a planar [3, H, W] tensor with values in [0,1].
pub fn read_image(path: &Path) -> Result<Tensor, Fail> {
    let (h, bytes) = read_payload(path)?;
    let (wd, ht) = (h.width, h.height);
    let pixels = wd * ht;
    let mut data = vec![0.0; 3 * pixels];
    for p in 0..pixels {
        for c in 0..3 {
            data[c * pixels + p] = bytes[h.offset + 3 * p + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, ht, wd], data).expect("shape matches payload length"))
}

/// Writes a [3, H, W] tensor as P6, quantizing with [`quantize`].
pub fn write_image(t: &Tensor, path: &Path) -> Result<(), Fail> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Fail::Io(format!(
            "cannot write tensor shaped {s:?} as an image (expected [3, H, W])"
        )));
    }
    let (ht, wd) = (s[1], s[2]);
    let pixels = ht * wd;
    let mut out = format!("P6\n{wd} {ht}\n255\n").into_bytes();
    out.reserve(3 * pixels);
    let data = t.data();
    for p in 0..pixels {
        for c in 0..3 {
            out.push(quantize(data[c * pixels + p]));
        }
    }
    std::fs::write(path, out).map_err(|e| Fail::Io(format!("{}: {e}", path.display())))
}

/// Reads a grayscale P6 mask: every pixel must have equal channels, and
/// each distinct byte value becomes one region label (ascending order).
pub fn read_mask(path: &Path) -> Result<RegionMask, Fail> {
    let (h, bytes) = read_payload(path)?;
    let pixels = h.width * h.height;
    let mut values = Vec::with_capacity(pixels);
    for p in 0..pixels {
        let (r, g, b) = (
            bytes[h.offset + 3 * p],
            bytes[h.offset + 3 * p + 1],
            bytes[h.offset + 3 * p + 2],
        );
        if r != g || g != b {
            return Err(Fail::Io(format!(
                "{}: mask must be grayscale (pixel {p} has distinct channels)",
                path.display()
            )));
        }
        values.push(r);
    }
    let mut distinct: Vec<u8> = values.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let labels: Vec<usize> = values
        .iter()
        .map(|v| distinct.binary_search(v).expect("value came from this list"))
        .collect();
    RegionMask::new(h.height, h.width, labels, distinct.len())
        .map_err(|e| Fail::Io(format!("{}: {e}", path.display())))
}
