//! Binary PPM (P6) images and simple box overlays.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

/// Quantises `[0, 1]` values to 8 bits.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_u8(image.at3(ch, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |m: &str| Error::Data(format!("PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let data = bytes
        .get(pos + 1..)
        .ok_or_else(|| bad("missing pixel data"))?;
    if data.len() < 3 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let mut t = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                t.set3(ch, y, x, data[(y * w + x) * 3 + ch] as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Draws a 1-pixel rectangle outline.
pub fn draw_box(image: &mut Tensor<f64>, b: &BBox, color: [f64; 3]) {
    let Ok((_, h, w)) = image.chw() else { return };
    if h == 0 || w == 0 {
        return;
    }
    let cx = |v: f64| (v.round().max(0.0) as usize).min(w - 1);
    let cy = |v: f64| (v.round().max(0.0) as usize).min(h - 1);
    let (x0, x1, y0, y1) = (cx(b.x_t), cx(b.x_b), cy(b.y_t), cy(b.y_b));
    for (ch, &c) in color.iter().enumerate() {
        for x in x0..=x1 {
            image.set3(ch, y0, x, c);
            image.set3(ch, y1, x, c);
        }
        for y in y0..=y1 {
            image.set3(ch, y, x0, c);
            image.set3(ch, y, x1, c);
        }
    }
}
