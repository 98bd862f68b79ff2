//! Binary PGM (P5) and PPM (P6) export with per-image contrast stretch.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affinely maps one image onto `[0, 1]`; a constant image maps to zeros.
pub fn normalize_unit(image: &Tensor) -> Tensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span > 0.0 && span.is_finite() {
        image.map(|v| (v - lo) / span)
    } else {
        Tensor::zeros(image.shape())
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `K×C×H×W` batch (C is 1 or 3) as one image. With `per_row =
/// Some(n)` the images are tiled `n` per row with 1-pixel black separators;
/// otherwise they form a single row. Each image is contrast-stretched
/// independently before quantization.
pub fn encode_grid(batch: &Tensor, per_row: Option<usize>) -> Result<Vec<u8>> {
    let &[k, c, h, w] = batch.shape() else {
        return Err(Error::invalid("write_image_grid", format!("expected K×C×H×W, got {:?}", batch.shape())));
    };
    if c != 1 && c != 3 {
        return Err(Error::invalid("write_image_grid", format!("{c} channels; PGM/PPM need 1 or 3")));
    }
    let cols = per_row.unwrap_or(k).clamp(1, k);
    let rows = k.div_ceil(cols);
    let width = cols * w + cols - 1;
    let height = rows * h + rows - 1;
    let mut pixels = vec![0u8; width * height * c];
    for i in 0..k {
        let img = normalize_unit(&batch.index_outer(i));
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img.data()[(ch * h + y) * w + x];
                    pixels[((oy + y) * width + ox + x) * c + ch] = quantize(v);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_image_grid(batch: &Tensor, path: &Path, per_row: Option<usize>) -> Result<()> {
    fs::write(path, encode_grid(batch, per_row)?).map_err(|e| Error::io(path, e))
}

/// Decodes a binary PGM or PPM into a `1×C×H×W` tensor in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::Format(format!("PNM: {msg}"));
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            return Err(Error::BadMagic {
                offset: 0,
                expected: b"P5".to_vec(),
                found: bytes.iter().take(2).copied().collect(),
            })
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    pos += 1;
    let [w, h, max] = fields;
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let data = bytes.get(pos..pos + w * h * channels).ok_or_else(|| bad("truncated pixel data"))?;
    Ok(Tensor::from_fn(&[1, channels, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        data[p * channels + ch] as f64 / 255.0
    }))
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    decode_pnm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
