//! PNG images and masks, PFM depth maps.

use std::io::{BufRead, Cursor, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Decodes a PNG into an RGB raster in `[0, 1]`.
pub fn decode_png_rgb(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Raster::new(h as usize, w as usize, 3, data)
}

/// Decodes a PNG mask: any nonzero luminance is foreground.
pub fn decode_png_mask(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| if v > 0 { 1.0 } else { 0.0 })
        .collect();
    Raster::new(h as usize, w as usize, 1, data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel raster with values in `[0, 1]` as PNG.
pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let (h, w) = r.dims();
    let img = match r.channels() {
        1 => DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w as u32, h as u32, r.data().iter().map(|&v| to_u8(v)).collect())
                .expect("buffer length matches dimensions"),
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, r.data().iter().map(|&v| to_u8(v)).collect())
                .expect("buffer length matches dimensions"),
        ),
        c => return Err(Error::invalid(format!("cannot encode {c}-channel raster as PNG"))),
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn read_png_rgb(path: impl AsRef<Path>) -> Result<Raster> {
    decode_png_rgb(&std::fs::read(path)?)
}

pub fn read_png_mask(path: impl AsRef<Path>) -> Result<Raster> {
    decode_png_mask(&std::fs::read(path)?)
}

pub fn write_png(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    std::fs::write(path, encode_png(r)?)?;
    Ok(())
}

/// Decodes a greyscale (`Pf`) or colour (`PF`) portable float map.
///
/// A negative scale marks little-endian data. Rows are stored bottom to
/// top; the returned raster is top to bottom.
pub fn decode_pfm(bytes: &[u8]) -> Result<Raster> {
    let mut cur = Cursor::new(bytes);
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if cur.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PFM header".into()));
        }
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::Format(format!("bad PFM magic `{other}`"))),
    };
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Format(format!("bad PFM header field `{s}`")))
    };
    let w = parse(&tokens[1])? as usize;
    let h = parse(&tokens[2])? as usize;
    let scale = parse(&tokens[3])?;
    let little = scale < 0.0;
    let mut raw = Vec::new();
    cur.read_to_end(&mut raw)?;
    let n = w * h * channels;
    if raw.len() < n * 4 {
        return Err(Error::Format(format!(
            "PFM body has {} bytes, need {}",
            raw.len(),
            n * 4
        )));
    }
    let mut data = vec![0.0; n];
    for (row_from_bottom, chunk) in raw[..n * 4].chunks_exact(w * channels * 4).enumerate() {
        let y = h - 1 - row_from_bottom;
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            let bytes = [b[0], b[1], b[2], b[3]];
            let v = if little {
                f32::from_le_bytes(bytes)
            } else {
                f32::from_be_bytes(bytes)
            };
            data[y * w * channels + i] = f64::from(v);
        }
    }
    Raster::new(h, w, channels, data)
}

/// Encodes a 1- or 3-channel raster as little-endian PFM.
pub fn encode_pfm(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("cannot encode {c}-channel raster as PFM"))),
    };
    let (h, w) = r.dims();
    let mut out = Vec::with_capacity(32 + r.data().len() * 4);
    write!(out, "{magic}\n{w} {h}\n-1.0\n")?;
    let row_len = w * r.channels();
    for y in (0..h).rev() {
        for &v in &r.data()[y * row_len..(y + 1) * row_len] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Raster> {
    decode_pfm(&std::fs::read(path)?)
}

pub fn write_pfm(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    std::fs::write(path, encode_pfm(r)?)?;
    Ok(())
}
