//! Image decoding to `[3,H,W]` tensors in [0,1] and 8-bit encoding back.
//!
//! PNG and JPEG go through the `image` crate; binary PPM (P6) and PGM (P5)
//! are handled here.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "ppm"];

/// Whether the file extension is one the loader reads.
pub fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decode_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses the whitespace/comment separated header fields of a PNM file.
fn pnm_header<'a>(bytes: &'a [u8], path: &Path, magic: &[u8; 2]) -> Result<([usize; 3], &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(decode_err(path, "bad PNM magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| decode_err(path, "malformed PNM header"))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "malformed PNM header"));
    }
    Ok((fields, &bytes[pos + 1..]))
}

/// Decodes a binary P6 PPM with maxval ≤ 255.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let ([w, h, maxval], raster) = pnm_header(bytes, path, b"P6")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(decode_err(
            path,
            format!("unsupported PPM {w}×{h} maxval {maxval}"),
        ));
    }
    if raster.len() < w * h * 3 {
        return Err(decode_err(path, "truncated PPM raster"));
    }
    Ok(interleaved_to_tensor(
        &raster[..w * h * 3],
        w,
        h,
        maxval as f32,
    ))
}

fn interleaved_to_tensor(rgb: &[u8], w: usize, h: usize, maxval: f32) -> Tensor<f32> {
    let plane = w * h;
    Tensor::from_fn(vec![3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        rgb[p * 3 + c] as f32 / maxval
    })
}

/// Reads an image file as a `[3,H,W]` tensor with values in [0,1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return decode_ppm(&bytes, path);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| decode_err(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(interleaved_to_tensor(rgb.as_raw(), w, h, 255.0))
}

/// Interleaved 8-bit RGB from a `[3,H,W]` tensor (values clamped to [0,1]).
pub fn tensor_to_rgb8(t: &Tensor<f32>) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w) = match *t.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape("tensor_to_rgb8", format!("{s:?}"))),
    };
    let plane = h * w;
    let mut out = vec![0u8; plane * 3];
    for c in 0..3 {
        for p in 0..plane {
            out[p * 3 + c] = (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok((out, w, h))
}

pub fn write_ppm(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P6\n{w} {h}\n255\n")
        .and_then(|_| f.write_all(rgb))
        .map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, gray: &[u8], w: usize, h: usize) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{w} {h}\n255\n")
        .and_then(|_| f.write_all(gray))
        .map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ([w, h, maxval], raster) = pnm_header(&bytes, path, b"P5")?;
    if maxval == 0 || maxval > 255 || raster.len() < w * h {
        return Err(decode_err(path, "unsupported or truncated PGM"));
    }
    Ok((raster[..w * h].to_vec(), w, h))
}

/// Writes RGB as PNG, or as PPM when the path ends in `.ppm`.
pub fn write_rgb(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if is_ppm {
        return write_ppm(path, rgb, w, h);
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, rgb.to_vec())
        .ok_or_else(|| Error::shape("write_rgb", "buffer does not match extents"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn write_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (rgb, w, h) = tensor_to_rgb8(t)?;
    write_rgb(path, &rgb, w, h)
}
