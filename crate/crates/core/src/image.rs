//! Float images and their PFM / PNG encodings.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major image, top row first, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Channels `range` of every pixel as a new image.
    pub fn select(&self, range: std::ops::Range<usize>) -> Image {
        let c = range.len();
        let mut data = Vec::with_capacity(self.pixels() * c);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[range.clone()]);
        }
        Image { width: self.width, height: self.height, channels: c, data }
    }

    /// Round-trips every value through `f32`, matching what PFM stores.
    pub fn quantized_f32(&self) -> Image {
        Image { data: self.data.iter().map(|&v| v as f32 as f64).collect(), ..self.clone() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }
}

/// Writes a little-endian PFM (`PF` for 3 channels, `Pf` for 1).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let tag = match img.channels {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::invalid(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    let mut bytes = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    bytes.reserve(img.data.len() * 4);
    // PFM scanlines run bottom to top.
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * img.channels..(y + 1) * img.width * img.channels];
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    // Header: tag, width, height, scale separated by whitespace.
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        t => return Err(bad(&format!("unknown PFM tag {t:?}"))),
    };
    let width: usize = fields[1].parse().map_err(|_| bad("bad PFM width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad PFM scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM is not supported"));
    }
    let n = width * height * channels;
    if bytes.len() < pos + n * 4 {
        return Err(bad(&format!("expected {n} samples, file is truncated")));
    }
    let mut data = vec![0.0; n];
    let stride = width * channels;
    for (k, chunk) in bytes[pos..pos + n * 4].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        let (file_row, col) = (k / stride, k % stride);
        data[(height - 1 - file_row) * stride + col] = v;
    }
    Image::new(width, height, channels, data)
}

/// 8-bit preview; values clamped to `[0, 1]`, no transfer curve.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::invalid(format!("PNG preview needs 1, 3 or 4 channels, not {c}"))),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_keeps_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let data: Vec<f64> = (0..2 * 3 * 3).map(|v| v as f64 * 0.25).collect();
        let img = Image::new(2, 3, 3, data).unwrap();
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn truncated_pfm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pfm");
        fs::write(&p, b"PF\n4 4\n-1.0\n\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(Error::Format { .. })));
    }
}
