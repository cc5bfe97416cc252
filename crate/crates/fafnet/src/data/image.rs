//! Multiband raster images and the "FAFIMG1" on-disk container.
//!
//! Disk layout, little-endian: magic "FAFIMG1" (7 bytes), u32 height,
//! u32 width, u32 bands, u16 bit depth, then the sample payload as
//! band-sequential row-major f32. The in-memory layout matches the payload:
//! one (H, W) plane per band.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{arg_err, shape_err, FafError, Result};

const MAGIC: &[u8; 7] = b"FAFIMG1";
const MAX_DIM: u32 = 1 << 20;
const MAX_BANDS: u32 = 1 << 10;

/// A real-valued raster with shape (H, W, B); digital numbers live in
/// [0, 2^bit_depth - 1] until normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    bands: usize,
    pub bit_depth: u16,
    pub sensor: String,
    /// Band-sequential planes: index (b * h + y) * w + x.
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, bands: usize, bit_depth: u16, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || bands == 0 {
            return Err(arg_err("image", format!("dimensions must be positive, got {h}x{w}x{bands}")));
        }
        if data.len() != h * w * bands {
            return Err(shape_err(
                "image",
                format!("{h}x{w}x{bands} needs {} samples, got {}", h * w * bands, data.len()),
            ));
        }
        Ok(Image { h, w, bands, bit_depth, sensor: String::new(), data })
    }

    pub fn zeros(h: usize, w: usize, bands: usize, bit_depth: u16) -> Result<Self> {
        Self::new(h, w, bands, bit_depth, vec![0.0; h * w * bands])
    }

    pub fn constant(h: usize, w: usize, bands: usize, bit_depth: u16, value: f32) -> Result<Self> {
        Self::new(h, w, bands, bit_depth, vec![value; h * w * bands])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn max_value(&self) -> f32 {
        (2f64.powi(self.bit_depth as i32) - 1.0) as f32
    }

    pub fn get(&self, y: usize, x: usize, band: usize) -> f32 {
        self.data[(band * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, band: usize, v: f32) {
        self.data[(band * self.h + y) * self.w + x] = v;
    }

    /// Contiguous (H, W) plane for one band.
    pub fn band(&self, band: usize) -> &[f32] {
        &self.data[band * self.h * self.w..(band + 1) * self.h * self.w]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f32] {
        &mut self.data[band * self.h * self.w..(band + 1) * self.h * self.w]
    }

    pub fn samples(&self) -> &[f32] {
        &self.data
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Axis-aligned crop of `size` x `size` pixels starting at (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, size_h: usize, size_w: usize) -> Result<Image> {
        if y0 + size_h > self.h || x0 + size_w > self.w {
            return Err(shape_err(
                "crop",
                format!("window {size_h}x{size_w} at ({y0},{x0}) exceeds image {}x{}", self.h, self.w),
            ));
        }
        let mut out = Image::zeros(size_h, size_w, self.bands, self.bit_depth)?;
        out.sensor = self.sensor.clone();
        for b in 0..self.bands {
            for y in 0..size_h {
                let src = &self.band(b)[(y0 + y) * self.w + x0..(y0 + y) * self.w + x0 + size_w];
                out.band_mut(b)[y * size_w..(y + 1) * size_w].copy_from_slice(src);
            }
        }
        Ok(out)
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> FafError {
    FafError::Format { path: path.display().to_string(), detail: detail.into() }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(img.h as u32).to_le_bytes())?;
    w.write_all(&(img.w as u32).to_le_bytes())?;
    w.write_all(&(img.bands as u32).to_le_bytes())?;
    w.write_all(&img.bit_depth.to_le_bytes())?;
    for v in &img.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(path, "truncated payload while reading magic"))?;
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>, what: &str| -> Result<u32> {
        r.read_exact(&mut u32buf)
            .map_err(|_| format_err(path, format!("truncated payload while reading {what}")))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let h = read_u32(&mut r, "height")?;
    let w = read_u32(&mut r, "width")?;
    let bands = read_u32(&mut r, "bands")?;
    if h == 0 || w == 0 || bands == 0 {
        return Err(format_err(path, format!("zero dimension in header: {h}x{w}x{bands}")));
    }
    if h > MAX_DIM || w > MAX_DIM || bands > MAX_BANDS {
        return Err(format_err(path, format!("dimension overflow in header: {h}x{w}x{bands}")));
    }
    let mut depth_buf = [0u8; 2];
    r.read_exact(&mut depth_buf)
        .map_err(|_| format_err(path, "truncated payload while reading bit depth"))?;
    let bit_depth = u16::from_le_bytes(depth_buf);
    let numel = h as u64 * w as u64 * bands as u64;
    if numel > (MAX_DIM as u64) * (MAX_DIM as u64) {
        return Err(format_err(path, format!("sample count {numel} overflows limit")));
    }
    let mut payload = vec![0u8; numel as usize * 4];
    r.read_exact(&mut payload)
        .map_err(|_| format_err(path, "truncated payload"))?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    let data: Vec<f32> =
        payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(format_err(path, "payload contains non-finite samples"));
    }
    Image::new(h as usize, w as usize, bands as usize, bit_depth, data)
        .map_err(|e| format_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Image {
        let mut img = Image::zeros(7, 5, 3, 11).unwrap();
        let mut v = 1.0f32;
        for s in img.samples_mut() {
            v = (v * 31.0 + 17.0) % 2047.0;
            *s = v.floor();
        }
        img
    }

    #[test]
    fn roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.fafimg");
        let img = sample_image();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.samples(), img.samples());
        assert_eq!(back.bit_depth, 11);
        // write-of-read is byte-identical
        let path2 = dir.path().join("img2.fafimg");
        write_image(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_and_payload_sizes() {
        // 256x256x4 at depth 11: payload is 256*256*4 samples * 4 bytes
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.fafimg");
        let img = Image::zeros(256, 256, 4, 11).unwrap();
        write_image(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = 7 + 4 + 4 + 4 + 2;
        assert_eq!(bytes.len(), header + 1_048_576);
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.fafimg");
        write_image(&path, &sample_image()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.fafimg");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = read_image(&cut).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn bad_magic_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.fafimg");
        std::fs::write(&path, b"NOTImg1but_long_enough_to_have_bytes").unwrap();
        let err = read_image(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn dim_overflow_is_a_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.fafimg");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&8u16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = read_image(&path).unwrap_err().to_string();
        assert!(err.contains("overflow"), "{err}");
    }
}
