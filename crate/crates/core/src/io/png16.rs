//! 16-bit grayscale PNG projections and lossless float sidecars.
//!
//! A value `v ∈ [0, 1]` is stored as `floor(v·65535 + 0.5)`; reading divides
//! by 65535, so the round-trip error is at most `1/131070`. Sidecars store
//! the exact `f64` pixels: magic `CTSF`, `u32` width, `u32` height, `f64`
//! view angle, then `width·height` `f64` values, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ProjectionImage;

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16
}

pub fn dequantize(q: u16) -> f64 {
    q as f64 / 65535.0
}

/// Writes pixels (clamped to `[0, 1]`) as a 16-bit grayscale PNG.
pub fn write_image(img: &ProjectionImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let data: Vec<u8> = img
        .pixels
        .iter()
        .flat_map(|v| quantize(*v).to_be_bytes())
        .collect();
    writer
        .write_image_data(&data)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn read_image(path: &Path) -> Result<ProjectionImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Image(format!(
            "{}: expected 16-bit grayscale, found {:?} at {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; w * h * 2];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    let pixels = buf
        .chunks_exact(2)
        .map(|b| dequantize(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    ProjectionImage::new(w, h, pixels, 0.0)
}

const SIDECAR_MAGIC: &[u8; 4] = b"CTSF";

pub fn write_float_sidecar(img: &ProjectionImage, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(20 + 8 * img.len());
    out.extend_from_slice(SIDECAR_MAGIC);
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&img.view_angle_deg.to_le_bytes());
    for p in &img.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_float_sidecar(path: &Path) -> Result<ProjectionImage> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != SIDECAR_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "missing float sidecar header".into(),
        });
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let angle = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[20..];
    if body.len() != 8 * w * h {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("expected {} pixel bytes, found {}", 8 * w * h, body.len()),
        });
    }
    let pixels = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ProjectionImage::new(w, h, pixels, angle)
}
