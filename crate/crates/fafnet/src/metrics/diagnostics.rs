//! Visual diagnostics: a log-magnitude frequency spectrum of the band-mean
//! image and a per-pixel absolute error map, rendered to portable
//! graymap/pixmap buffers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::data::image::Image;
use crate::error::{shape_err, Result};

/// 8-bit grayscale raster (PGM "P5").
#[derive(Clone, Debug)]
pub struct GrayMap {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit RGB raster (PPM "P6").
#[derive(Clone, Debug)]
pub struct PixMap {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    /// log(1 + |centered 2D FFT|) of the band-mean image, min-max scaled.
    pub spectrum: GrayMap,
    /// Per-pixel mean absolute error over bands, on a fixed heat colormap
    /// scaled by the digital range.
    pub error_map: PixMap,
}

impl GrayMap {
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P5\n{} {}\n255\n", self.w, self.h)?;
        w.write_all(&self.pixels)?;
        w.flush()?;
        Ok(())
    }
}

impl PixMap {
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "P6\n{} {}\n255\n", self.w, self.h)?;
        w.write_all(&self.rgb)?;
        w.flush()?;
        Ok(())
    }
}

/// Centered 2D FFT magnitude of a real plane.
fn fft2_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut grid: Vec<Complex64> = plane.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    for y in 0..h {
        row_fft.process(&mut grid[y * w..(y + 1) * w]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    // fftshift so the DC bin sits at the center
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y + h / 2) % h;
            let sx = (x + w / 2) % w;
            out[sy * w + sx] = grid[y * w + x].norm();
        }
    }
    out
}

/// Fixed heat colormap on [0, 1]: black -> red -> yellow -> white.
fn heat(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let stage = v * 3.0;
    let to8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    if stage < 1.0 {
        [to8(stage), 0, 0]
    } else if stage < 2.0 {
        [255, to8(stage - 1.0), 0]
    } else {
        [255, 255, to8(stage - 2.0)]
    }
}

/// Produce the spectrum map of the fused image and the absolute error map
/// against the reference.
pub fn diagnostics(fused: &Image, reference: &Image) -> Result<Diagnostics> {
    if fused.height() != reference.height()
        || fused.width() != reference.width()
        || fused.bands() != reference.bands()
    {
        return Err(shape_err(
            "diagnostics",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                fused.height(),
                fused.width(),
                fused.bands(),
                reference.height(),
                reference.width(),
                reference.bands()
            ),
        ));
    }
    let (h, w, bands) = (fused.height(), fused.width(), fused.bands());

    // band-mean plane of the fused image
    let mut mean_plane = vec![0.0f64; h * w];
    for b in 0..bands {
        for (dst, v) in mean_plane.iter_mut().zip(fused.band(b)) {
            *dst += *v as f64;
        }
    }
    for v in mean_plane.iter_mut() {
        *v /= bands as f64;
    }
    let mag = fft2_magnitude(&mean_plane, h, w);
    let log_mag: Vec<f64> = mag.iter().map(|m| (1.0 + m).ln()).collect();
    let lo = log_mag.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = log_mag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-30);
    let spectrum = GrayMap {
        h,
        w,
        pixels: log_mag.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8).collect(),
    };

    // absolute error map, scaled by the digital range so renders are
    // comparable across images of the same bit depth
    let max = reference.max_value() as f64;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for b in 0..bands {
                acc += (fused.get(y, x, b) as f64 - reference.get(y, x, b) as f64).abs();
            }
            let err = acc / bands as f64 / max;
            rgb.extend_from_slice(&heat(err));
        }
    }
    Ok(Diagnostics { spectrum, error_map: PixMap { h, w, rgb } })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_give_black_error_map() {
        let mut img = Image::zeros(8, 8, 2, 8).unwrap();
        for (i, v) in img.samples_mut().iter_mut().enumerate() {
            *v = (i % 61) as f32;
        }
        let d = diagnostics(&img, &img).unwrap();
        assert!(d.error_map.rgb.iter().all(|v| *v == 0));
    }

    #[test]
    fn constant_image_spectrum_is_a_dc_peak() {
        let img = Image::constant(16, 16, 1, 8, 50.0).unwrap();
        let d = diagnostics(&img, &img).unwrap();
        let center = (8 * 16 + 8) as usize;
        assert_eq!(d.spectrum.pixels[center], 255);
        let bright: usize = d.spectrum.pixels.iter().filter(|v| **v > 128).count();
        assert_eq!(bright, 1, "only the DC bin should be bright");
    }

    #[test]
    fn horizontal_sinusoid_gives_two_symmetric_peaks() {
        let (h, w) = (16usize, 16usize);
        let mut img = Image::zeros(h, w, 1, 8).unwrap();
        for y in 0..h {
            for x in 0..w {
                // frequency 2 cycles across the width, constant along y
                let v = 100.0 + 50.0 * (x as f64 * 2.0 * std::f64::consts::TAU / w as f64).sin();
                img.set(y, x, 0, v as f32);
            }
        }
        let d = diagnostics(&img, &img).unwrap();
        // top-3 bins: DC at center plus two symmetric horizontal offsets
        let mut idx: Vec<usize> = (0..h * w).collect();
        idx.sort_by(|a, b| d.spectrum.pixels[*b].cmp(&d.spectrum.pixels[*a]));
        let center = (h / 2, w / 2);
        let to_yx = |i: usize| (i / w, i % w);
        let top: Vec<(usize, usize)> = idx[..3].iter().map(|i| to_yx(*i)).collect();
        assert!(top.contains(&center));
        assert!(top.contains(&(center.0, center.1 + 2)));
        assert!(top.contains(&(center.0, center.1 - 2)));
    }

    #[test]
    fn pgm_ppm_files_have_expected_headers() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::constant(4, 6, 1, 8, 10.0).unwrap();
        let d = diagnostics(&img, &img).unwrap();
        let pgm = dir.path().join("s.pgm");
        let ppm = dir.path().join("e.ppm");
        d.spectrum.write_pgm(&pgm).unwrap();
        d.error_map.write_ppm(&ppm).unwrap();
        let pg = std::fs::read(&pgm).unwrap();
        assert!(pg.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(pg.len(), 11 + 24);
        let pp = std::fs::read(&ppm).unwrap();
        assert!(pp.starts_with(b"P6\n6 4\n255\n"));
        assert_eq!(pp.len(), 11 + 72);
    }
}
