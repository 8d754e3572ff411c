use std::path::Path;

use super::FrameRecord;
use crate::error::{Error, Result};
use crate::interp;
use crate::tensor::Tensor;

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn decode_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses a binary PGM (`P5`, maxval ≤ 255). Samples are rescaled to 0..=255.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&bytes).map_err(|r| decode_err(path, r))
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("missing P5 magic".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad header number")?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero-sized image".into());
    }
    if !(1..=255).contains(&maxval) {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let n = width * height;
    let raster = bytes
        .get(pos..pos + n)
        .ok_or_else(|| format!("raster truncated: need {n} bytes"))?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
            .collect()
    };
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Bilinear resize to `1×size×size` with intensities scaled to [0, 1].
pub fn resize_image(img: &GrayImage, size: usize) -> Tensor {
    let src: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let data = interp::resize_bilinear(&src, img.height, img.width, size, size);
    Tensor::from_vec(&[1, size, size], data).expect("resize output matches shape")
}

/// Nearest-neighbour resize to `1×size×size`; pixels ≥ 128 map to 1, the rest to 0.
pub fn resize_mask(mask: &GrayImage, size: usize) -> Tensor {
    let src: Vec<f64> = mask
        .pixels
        .iter()
        .map(|&p| if p >= 128 { 1.0 } else { 0.0 })
        .collect();
    let data = interp::resize_nearest(&src, mask.height, mask.width, size, size);
    Tensor::from_vec(&[1, size, size], data).expect("resize output matches shape")
}

/// Loads a frame (and its mask, when labelled) resized to `target_size`.
pub fn load_pair(
    root: &Path,
    record: &FrameRecord,
    target_size: usize,
) -> Result<(Tensor, Option<Tensor>)> {
    let img = read_pgm(&root.join(&record.image_path))?;
    let mask = match &record.mask_path {
        None => None,
        Some(p) => {
            let m = read_pgm(&root.join(p))?;
            if (m.width, m.height) != (img.width, img.height) {
                return Err(Error::ShapeMismatch(format!(
                    "{}: image is {}x{} but mask is {}x{}",
                    record.image_path.display(),
                    img.width,
                    img.height,
                    m.width,
                    m.height
                )));
            }
            Some(resize_mask(&m, target_size))
        }
    };
    Ok((resize_image(&img, target_size), mask))
}
