//! Quality indexes for fused imagery: reduced-resolution indexes against a
//! reference (SAM, ERGAS, Q2n, SCC) and the no-reference family (D_lambda,
//! D_s, QNR), plus spectrum/error-map diagnostics.
//!
//! All computations run in f64 with fixed reduction order, so reports are
//! bit-reproducible.

pub mod diagnostics;
pub mod q2n;
pub mod qnr;

use serde::{Deserialize, Serialize};

use crate::data::image::Image;
use crate::error::{arg_err, degenerate_err, shape_err, Result};

pub use diagnostics::{diagnostics, Diagnostics, GrayMap, PixMap};
pub use q2n::q2n;
pub use qnr::qnr_suite;

/// The seven-index record for one fused/reference (or fused/source) pair.
/// Reduced-resolution runs fill the first four, full-resolution runs the
/// last three.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sam_deg: Option<f64>,
    pub ergas: Option<f64>,
    pub q2n: Option<f64>,
    pub scc: Option<f64>,
    pub d_lambda: Option<f64>,
    pub d_s: Option<f64>,
    pub qnr: Option<f64>,
}

/// Block handling for the universal image quality index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UiqiMode {
    Global,
    /// Non-overlapping square tiles of the given side; the tile grid is
    /// clamped to the image, trailing remainders are ignored.
    Tiled(usize),
}

/// Wang-Bovik index on one block: 4 cov(a,b) mean(a) mean(b) /
/// ((var(a)+var(b)) (mean(a)^2+mean(b)^2)).
///
/// Degenerate blocks are pinned: both variances zero gives 1 when the
/// blocks are identical and 0 otherwise; a single zero variance gives 0.
fn uiqi_block(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - mean_a;
        let db = y - mean_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    if var_a == 0.0 && var_b == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    let denom = (var_a + var_b) * (mean_a * mean_a + mean_b * mean_b);
    if denom == 0.0 {
        return 0.0;
    }
    4.0 * cov * mean_a * mean_b / denom
}

/// Universal image quality index over two equally-shaped 2D planes.
pub fn uiqi(a: &[f64], b: &[f64], h: usize, w: usize, mode: UiqiMode) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(shape_err(
            "uiqi",
            format!("plane buffers must hold {h}x{w} samples, got {} and {}", a.len(), b.len()),
        ));
    }
    match mode {
        UiqiMode::Global => Ok(uiqi_block(a, b)),
        UiqiMode::Tiled(block) => {
            if block < 2 {
                return Err(arg_err("uiqi", format!("block must be >= 2, got {block}")));
            }
            // shrink the tile if the image is smaller than the nominal block
            let block = block.min(h).min(w);
            let (ty, tx) = (h / block, w / block);
            if ty == 0 || tx == 0 {
                return Err(shape_err("uiqi", format!("image {h}x{w} smaller than block {block}")));
            }
            let mut acc = 0.0;
            let mut buf_a = vec![0.0; block * block];
            let mut buf_b = vec![0.0; block * block];
            for by in 0..ty {
                for bx in 0..tx {
                    for y in 0..block {
                        let src = (by * block + y) * w + bx * block;
                        buf_a[y * block..(y + 1) * block].copy_from_slice(&a[src..src + block]);
                        buf_b[y * block..(y + 1) * block].copy_from_slice(&b[src..src + block]);
                    }
                    acc += uiqi_block(&buf_a, &buf_b);
                }
            }
            Ok(acc / (ty * tx) as f64)
        }
    }
}

fn check_same_shape(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.bands() != b.bands() {
        return Err(shape_err(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height(),
                a.width(),
                a.bands(),
                b.height(),
                b.width(),
                b.bands()
            ),
        ));
    }
    Ok(())
}

/// Mean spectral angle in degrees between per-pixel band vectors.
/// Pixels where either vector is zero are skipped; the skipped count is
/// returned alongside the mean.
pub fn sam_with_stats(reference: &Image, fused: &Image) -> Result<(f64, usize)> {
    check_same_shape("sam", reference, fused)?;
    if reference.bands() < 2 {
        return Err(arg_err("sam", format!("needs at least 2 bands, got {}", reference.bands())));
    }
    let (h, w, bands) = (reference.height(), reference.width(), reference.bands());
    let mut acc = 0.0f64;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for b in 0..bands {
                let va = reference.get(y, x, b) as f64;
                let vb = fused.get(y, x, b) as f64;
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
            }
            if na == 0.0 || nb == 0.0 {
                skipped += 1;
                continue;
            }
            let cosine = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
            acc += cosine.acos();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(degenerate_err("sam", "every pixel has a zero spectral vector"));
    }
    Ok(((acc / counted as f64).to_degrees(), skipped))
}

pub fn sam(reference: &Image, fused: &Image) -> Result<f64> {
    sam_with_stats(reference, fused).map(|(v, _)| v)
}

/// Relative global error: 100/ratio * sqrt(mean over bands of
/// (RMSE_b / mean(reference_b))^2).
pub fn ergas(reference: &Image, fused: &Image, ratio: usize) -> Result<f64> {
    check_same_shape("ergas", reference, fused)?;
    if ratio == 0 {
        return Err(arg_err("ergas", "ratio must be >= 1"));
    }
    let n = (reference.height() * reference.width()) as f64;
    let mut acc = 0.0f64;
    for b in 0..reference.bands() {
        let rb = reference.band(b);
        let fb = fused.band(b);
        let mean: f64 = rb.iter().map(|v| *v as f64).sum::<f64>() / n;
        if mean == 0.0 {
            return Err(degenerate_err("ergas", format!("reference band {b} has zero mean")));
        }
        let mse: f64 =
            rb.iter().zip(fb).map(|(r, f)| ((*r - *f) as f64).powi(2)).sum::<f64>() / n;
        acc += mse / (mean * mean);
    }
    Ok(100.0 / ratio as f64 * (acc / reference.bands() as f64).sqrt())
}

/// 3x3 Laplacian high-pass on the interior of a band plane.
fn laplacian(band: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; (h - 2) * (w - 2)];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = 8.0 * band[y * w + x];
            let ring = band[(y - 1) * w + x - 1]
                + band[(y - 1) * w + x]
                + band[(y - 1) * w + x + 1]
                + band[y * w + x - 1]
                + band[y * w + x + 1]
                + band[(y + 1) * w + x - 1]
                + band[(y + 1) * w + x]
                + band[(y + 1) * w + x + 1];
            out[(y - 1) * (w - 2) + (x - 1)] = c - ring;
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (x, y) in a.iter().zip(b) {
        let da = x - ma;
        let db = y - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Spatial correlation: Pearson correlation of Laplacian-filtered bands,
/// averaged over bands. Bands whose filtered detail is constant are skipped
/// with a warning; if every band is skipped this is an error.
pub fn scc(reference: &Image, fused: &Image) -> Result<f64> {
    check_same_shape("scc", reference, fused)?;
    let (h, w) = (reference.height(), reference.width());
    if h < 3 || w < 3 {
        return Err(shape_err("scc", format!("needs at least 3x3 pixels, got {h}x{w}")));
    }
    let mut acc = 0.0;
    let mut counted = 0usize;
    for b in 0..reference.bands() {
        let rb: Vec<f64> = reference.band(b).iter().map(|v| *v as f64).collect();
        let fb: Vec<f64> = fused.band(b).iter().map(|v| *v as f64).collect();
        let hr = laplacian(&rb, h, w);
        let hf = laplacian(&fb, h, w);
        match pearson(&hr, &hf) {
            Some(r) => {
                acc += r;
                counted += 1;
            }
            None => log::warn!("scc: band {b} has zero-variance detail, skipped"),
        }
    }
    if counted == 0 {
        return Err(degenerate_err("scc", "every band has zero-variance detail"));
    }
    Ok(acc / counted as f64)
}
