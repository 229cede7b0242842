//! 8-bit RGB images: binary PPM (P6) and PNG.

use std::{fs, io, path::Path};

use cpe_core::{Shape, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("malformed image: {0}")]
    Malformed(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    /// PNG for `.png`, PPM otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
            _ => ImageFormat::Ppm,
        }
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

fn malformed(msg: impl Into<String>) -> ImageError {
    ImageError::Malformed(msg.into())
}

fn parse_ppm(bytes: &[u8]) -> Result<Rgb8, ImageError> {
    let mut pos = 2;
    let mut field = |name: &str| -> Result<usize, ImageError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(malformed(format!("PPM header ends before {name}"))),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(format!("PPM {name} is not a number")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(malformed(format!("PPM maxval {maxval}; only 8-bit (255) is supported")));
    }
    if width == 0 || height == 0 {
        return Err(malformed("PPM has zero width or height"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("PPM header not followed by whitespace"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| malformed("PPM dimensions overflow"))?;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| malformed(format!("PPM pixel data truncated: need {need} bytes")))?;
    Ok(Rgb8 {
        width,
        height,
        data: data.to_vec(),
    })
}

fn parse_png(bytes: &[u8]) -> Result<Rgb8, ImageError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| malformed(format!("PNG: {e}")))?;
    if img.color().bits_per_pixel() / u16::from(img.color().channel_count()) != 8 {
        return Err(malformed(format!("PNG color type {:?} is not 8-bit", img.color())));
    }
    let rgb = img.to_rgb8();
    Ok(Rgb8 {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        data: rgb.into_raw(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Rgb8, ImageError> {
    if bytes.starts_with(b"P6") {
        parse_ppm(bytes)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        parse_png(bytes)
    } else {
        Err(malformed("neither a binary PPM (P6) nor a PNG"))
    }
}

pub fn encode(img: &Rgb8, format: ImageFormat) -> Result<Vec<u8>, ImageError> {
    match format {
        ImageFormat::Ppm => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.data);
            Ok(out)
        }
        ImageFormat::Png => {
            let mut out = Vec::new();
            let encoder = image::codecs::png::PngEncoder::new(&mut out);
            image::ImageEncoder::write_image(
                encoder,
                &img.data,
                img.width as u32,
                img.height as u32,
                image::ExtendedColorType::Rgb8,
            )
            .map_err(|e| malformed(format!("PNG encode: {e}")))?;
            Ok(out)
        }
    }
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Rgb8, ImageError> {
    decode(&fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, img: &Rgb8) -> Result<(), ImageError> {
    let path = path.as_ref();
    fs::write(path, encode(img, ImageFormat::from_path(path))?)?;
    Ok(())
}

/// `(1, 3, H, W)` tensor with values `byte / 255`.
pub fn to_tensor(img: &Rgb8) -> Tensor {
    let plane = img.width * img.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, img.height, img.width), data).expect("finite pixels")
}

/// `round(clamp(x, 0, 1) · 255)` of the first image in the batch.
pub fn from_tensor(t: &Tensor) -> Result<Rgb8, ImageError> {
    let s = t.shape();
    if s.channels != 3 {
        return Err(malformed(format!("cannot write a {}-channel tensor as RGB", s.channels)));
    }
    let plane = s.plane();
    let mut data = vec![0u8; 3 * plane];
    for c in 0..3 {
        for (i, &v) in t.plane(0, c).iter().enumerate() {
            data[3 * i + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(Rgb8 {
        width: s.width,
        height: s.height,
        data,
    })
}
