//! Reduced-resolution simulation: Gaussian blur, center-aligned decimation,
//! Catmull-Rom bicubic upsampling, patch extraction and normalization.
//!
//! The protocol degrades both source images by the resolution ratio so the
//! original multispectral image can serve as the training reference.

use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::data::{FeatureMap, Real, TensorData};

/// Simulation and patching parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    /// Spatial resolution ratio of panchromatic to multispectral.
    pub ratio: usize,
    /// Side length of the blur kernel (5).
    pub gaussian_size: usize,
    pub sigma: f64,
    /// Side length of a multispectral training patch; the panchromatic and
    /// reference patches are `ratio` times larger.
    pub ms_patch: usize,
    /// Patch grid stride, in multispectral pixels.
    pub stride: usize,
    /// Fractions of scenes assigned to train/val (the rest is test).
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub bit_depth: u16,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            ratio: 4,
            gaussian_size: 5,
            sigma: 1.0,
            ms_patch: 16,
            stride: 16,
            train_fraction: 0.7,
            val_fraction: 0.15,
            bit_depth: 11,
            seed: 0,
        }
    }
}

/// Discretized Gaussian on a 5x5 grid, normalized to sum 1.
pub fn gaussian_kernel5(sigma: f64) -> Result<[[f64; 5]; 5]> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(arg_err("gaussian_kernel5", format!("sigma must be positive, got {sigma}")));
    }
    let mut k = [[0.0; 5]; 5];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let dy = i as f64 - 2.0;
            let dx = j as f64 - 2.0;
            *v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut k {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(k)
}

/// 5x5 blur with reflect padding, per band.
fn blur5(img: &Image, kernel: &[[f64; 5]; 5]) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::zeros(h, w, img.bands(), img.bit_depth)?;
    out.sensor = img.sensor.clone();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i as usize
    };
    for b in 0..img.bands() {
        let src = img.band(b);
        let dst = out.band_mut(b);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for (ky, krow) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ky as isize - 2, h);
                    for (kx, kv) in krow.iter().enumerate() {
                        let sx = reflect(x as isize + kx as isize - 2, w);
                        acc += kv * src[sy * w + sx] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Keep every `ratio`-th sample with a center phase offset of `ratio / 2`,
/// so the decimated grid stays registered with the original.
fn decimate(img: &Image, ratio: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h % ratio != 0 || w % ratio != 0 {
        return Err(shape_err(
            "degrade_wald",
            format!("dims {h}x{w} not divisible by ratio {ratio}"),
        ));
    }
    let (oh, ow) = (h / ratio, w / ratio);
    let off = ratio / 2;
    let mut out = Image::zeros(oh, ow, img.bands(), img.bit_depth)?;
    out.sensor = img.sensor.clone();
    for b in 0..img.bands() {
        let src = img.band(b);
        let dst = out.band_mut(b);
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y * ratio + off) * w + (x * ratio + off)];
            }
        }
    }
    Ok(out)
}

/// Blur both inputs with the 5x5 Gaussian and decimate by the ratio; the
/// original multispectral image is returned unchanged as the reference.
pub fn degrade_wald(ms: &Image, pan: &Image, cfg: &DatasetConfig) -> Result<(Image, Image, Image)> {
    if cfg.gaussian_size != 5 {
        return Err(arg_err(
            "degrade_wald",
            format!("only the 5x5 smoothing kernel is supported, got {}", cfg.gaussian_size),
        ));
    }
    if pan.bands() != 1 {
        return Err(shape_err("degrade_wald", format!("pan must be single-band, got {}", pan.bands())));
    }
    if pan.height() != cfg.ratio * ms.height() || pan.width() != cfg.ratio * ms.width() {
        return Err(shape_err(
            "degrade_wald",
            format!(
                "pan {}x{} must be ratio ({}) times ms {}x{}",
                pan.height(),
                pan.width(),
                cfg.ratio,
                ms.height(),
                ms.width()
            ),
        ));
    }
    let lr_ms = degrade_plane(ms, cfg)?;
    let lr_pan = degrade_plane(pan, cfg)?;
    Ok((lr_ms, lr_pan, ms.clone()))
}

/// Blur + decimate one image by the configured ratio (the same path the
/// protocol applies to both inputs).
pub fn degrade_plane(img: &Image, cfg: &DatasetConfig) -> Result<Image> {
    let kernel = gaussian_kernel5(cfg.sigma)?;
    decimate(&blur5(img, &kernel)?, cfg.ratio)
}

/// Catmull-Rom weight (the a = -0.5 cubic kernel).
fn catmull_rom(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Fetch with linear extrapolation past the edges (x[-k] = 2 x[0] - x[k]),
/// which keeps constants constant and linear ramps exact at the borders.
fn edge_extrapolate(get: impl Fn(usize) -> f64, n: usize, i: isize) -> f64 {
    if i < 0 {
        let mirror = ((-i) as usize).min(n - 1);
        2.0 * get(0) - get(mirror)
    } else if i as usize >= n {
        let over = i as usize - (n - 1);
        let mirror = (n - 1).saturating_sub(over);
        2.0 * get(n - 1) - get(mirror)
    } else {
        get(i as usize)
    }
}

/// Bicubic upsampling by an integer factor. Output pixel `o` samples input
/// coordinate `o / factor` (grid-aligned, so existing samples reproduce
/// exactly and linear ramps stay linear); the result is clamped to the
/// valid digital range.
pub fn bicubic_up(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 {
        return Err(arg_err("bicubic_up", "factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Image::zeros(oh, ow, img.bands(), img.bit_depth)?;
    out.sensor = img.sensor.clone();
    let max = img.max_value();

    // separable: horizontal pass then vertical pass
    for b in 0..img.bands() {
        let src = img.band(b);
        let mut mid = vec![0.0f64; h * ow];
        for y in 0..h {
            for ox in 0..ow {
                let sx = ox as f64 / factor as f64;
                let x0 = sx.floor() as isize;
                let frac = sx - x0 as f64;
                let mut acc = 0.0;
                for off in -1isize..=2 {
                    let v = edge_extrapolate(|i| src[y * w + i] as f64, w, x0 + off);
                    acc += catmull_rom(frac - off as f64) * v;
                }
                mid[y * ow + ox] = acc;
            }
        }
        let dst = out.band_mut(b);
        for oy in 0..oh {
            let sy = oy as f64 / factor as f64;
            let y0 = sy.floor() as isize;
            let frac = sy - y0 as f64;
            for ox in 0..ow {
                let mut acc = 0.0;
                for off in -1isize..=2 {
                    let v = edge_extrapolate(|i| mid[i * ow + ox], h, y0 + off);
                    acc += catmull_rom(frac - off as f64) * v;
                }
                dst[oy * ow + ox] = (acc as f32).clamp(0.0, max);
            }
        }
    }
    Ok(out)
}

/// Map digital numbers into [-1, 1]: y = 2 x / (2^depth - 1) - 1. Returns a
/// batch-of-one feature map in (1, B, H, W) layout.
pub fn normalize<T: Real>(img: &Image) -> FeatureMap<T> {
    let (h, w, b) = (img.height(), img.width(), img.bands());
    let max = img.max_value() as f64;
    let mut data = Vec::with_capacity(h * w * b);
    for band in 0..b {
        for v in img.band(band) {
            data.push(T::of(2.0 * (*v as f64) / max - 1.0));
        }
    }
    TensorData::from_vec(&[1, b, h, w], data).expect("sizes agree")
}

/// Inverse of `normalize` for a batch-of-one map, clamped to the digital
/// range.
pub fn denormalize<T: Real>(fm: &FeatureMap<T>, bit_depth: u16) -> Result<Image> {
    let (n, b, h, w) = fm.dims4("denormalize")?;
    if n != 1 {
        return Err(shape_err("denormalize", format!("expected batch of 1, got {n}")));
    }
    let max = (2f64.powi(bit_depth as i32) - 1.0) as f32;
    let mut img = Image::zeros(h, w, b, bit_depth)?;
    for band in 0..b {
        let src = &fm.data()[band * h * w..(band + 1) * h * w];
        for (dst, v) in img.band_mut(band).iter_mut().zip(src) {
            let x = ((v.as_f64() + 1.0) / 2.0 * max as f64) as f32;
            *dst = x.clamp(0.0, max);
        }
    }
    Ok(img)
}

/// One aligned training example: a low-resolution multispectral patch, the
/// matching panchromatic patch, and the full-resolution reference patch.
#[derive(Clone, Debug)]
pub struct PatchRecord {
    pub scene: String,
    /// Patch origin in multispectral pixels.
    pub ms_origin: (usize, usize),
    pub ms: Image,
    pub pan: Image,
    pub reference: Image,
}

/// Cut aligned patch triplets on a regular stride grid, in deterministic
/// row-major order.
pub fn extract_patches(
    scene: &str,
    lr_ms: &Image,
    lr_pan: &Image,
    reference: &Image,
    cfg: &DatasetConfig,
) -> Result<Vec<PatchRecord>> {
    let r = cfg.ratio;
    let p = cfg.ms_patch;
    if lr_ms.height() < p || lr_ms.width() < p {
        return Err(shape_err(
            "extract_patches",
            format!("image {}x{} smaller than patch {p}", lr_ms.height(), lr_ms.width()),
        ));
    }
    if lr_pan.height() != r * lr_ms.height() || reference.height() != r * lr_ms.height() {
        return Err(shape_err(
            "extract_patches",
            format!(
                "pan {}x{} and reference {}x{} must be ratio ({r}) times ms {}x{}",
                lr_pan.height(),
                lr_pan.width(),
                reference.height(),
                reference.width(),
                lr_ms.height(),
                lr_ms.width()
            ),
        ));
    }
    let mut out = Vec::new();
    let steps = |n: usize| (n - p) / cfg.stride + 1;
    for iy in 0..steps(lr_ms.height()) {
        for ix in 0..steps(lr_ms.width()) {
            let (y, x) = (iy * cfg.stride, ix * cfg.stride);
            out.push(PatchRecord {
                scene: scene.to_string(),
                ms_origin: (y, x),
                ms: lr_ms.crop(y, x, p, p)?,
                pan: lr_pan.crop(r * y, r * x, r * p, r * p)?,
                reference: reference.crop(r * y, r * x, r * p, r * p)?,
            });
        }
    }
    Ok(out)
}

/// Seeded in-place shuffle with a stable algorithm (Fisher-Yates over a
/// ChaCha stream), identical across runs and platforms.
pub fn shuffle_patches<R>(items: &mut [R], seed: u64) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
}
