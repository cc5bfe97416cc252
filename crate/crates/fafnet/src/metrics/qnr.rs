//! No-reference quality: spectral distortion (D_lambda), spatial
//! distortion (D_s) and their product form (QNR).

use crate::data::image::Image;
use crate::error::{shape_err, Result};
use crate::metrics::{uiqi, UiqiMode};

const QNR_BLOCK: usize = 32;

fn band_plane(img: &Image, b: usize) -> Vec<f64> {
    img.band(b).iter().map(|v| *v as f64).collect()
}

/// D_lambda = mean over ordered band pairs (b != c) of
/// |Q(fused_b, fused_c) - Q(ms_b, ms_c)|, D_s = mean over bands of
/// |Q(fused_b, pan) - Q(ms_b, lr_pan)|, QNR = (1 - D_lambda)(1 - D_s)
/// (exponents all 1).
pub fn qnr_suite(
    fused: &Image,
    ms: &Image,
    pan: &Image,
    lr_pan: &Image,
) -> Result<(f64, f64, f64)> {
    let bands = fused.bands();
    if ms.bands() != bands {
        return Err(shape_err("qnr", format!("fused has {bands} bands, ms has {}", ms.bands())));
    }
    if fused.height() != pan.height() || fused.width() != pan.width() {
        return Err(shape_err(
            "qnr",
            format!(
                "fused {}x{} must match pan {}x{}",
                fused.height(),
                fused.width(),
                pan.height(),
                pan.width()
            ),
        ));
    }
    if ms.height() != lr_pan.height() || ms.width() != lr_pan.width() {
        return Err(shape_err(
            "qnr",
            format!(
                "ms {}x{} must match degraded pan {}x{}",
                ms.height(),
                ms.width(),
                lr_pan.height(),
                lr_pan.width()
            ),
        ));
    }
    if pan.bands() != 1 || lr_pan.bands() != 1 {
        return Err(shape_err("qnr", "pan inputs must be single-band"));
    }

    let mode = UiqiMode::Tiled(QNR_BLOCK);
    let (fh, fw) = (fused.height(), fused.width());
    let (mh, mw) = (ms.height(), ms.width());

    let fused_planes: Vec<Vec<f64>> = (0..bands).map(|b| band_plane(fused, b)).collect();
    let ms_planes: Vec<Vec<f64>> = (0..bands).map(|b| band_plane(ms, b)).collect();
    let pan_plane = band_plane(pan, 0);
    let lr_pan_plane = band_plane(lr_pan, 0);

    let mut d_lambda = 0.0;
    if bands > 1 {
        for b in 0..bands {
            for c in 0..bands {
                if b == c {
                    continue;
                }
                let q_f = uiqi(&fused_planes[b], &fused_planes[c], fh, fw, mode)?;
                let q_m = uiqi(&ms_planes[b], &ms_planes[c], mh, mw, mode)?;
                d_lambda += (q_f - q_m).abs();
            }
        }
        d_lambda /= (bands * (bands - 1)) as f64;
    }

    let mut d_s = 0.0;
    for b in 0..bands {
        let q_f = uiqi(&fused_planes[b], &pan_plane, fh, fw, mode)?;
        let q_m = uiqi(&ms_planes[b], &lr_pan_plane, mh, mw, mode)?;
        d_s += (q_f - q_m).abs();
    }
    d_s /= bands as f64;

    Ok((d_lambda, d_s, qnr_from_distortions(d_lambda, d_s)))
}

/// Combine the two distortion indexes (unit exponents).
pub fn qnr_from_distortions(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistent_by_construction_scores_near_ideal() {
        // fused carries the ms band structure upsampled exactly, pan is the
        // fused band mean, lr_pan the ms band mean: Q relations then match
        // across scales and both distortions vanish.
        let (mh, mw, bands, r) = (16usize, 16usize, 4usize, 2usize);
        let mut ms = Image::zeros(mh, mw, bands, 8).unwrap();
        let mut state = 11u64;
        for b in 0..bands {
            for y in 0..mh {
                for x in 0..mw {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(99);
                    ms.set(y, x, b, ((state >> 33) % 180) as f32 + 10.0);
                }
            }
        }
        // nearest-neighbor upsample reproduces every block statistic at the
        // tile scale used here
        let mut fused = Image::zeros(mh * r, mw * r, bands, 8).unwrap();
        for b in 0..bands {
            for y in 0..mh * r {
                for x in 0..mw * r {
                    fused.set(y, x, b, ms.get(y / r, x / r, b));
                }
            }
        }
        let mut pan = Image::zeros(mh * r, mw * r, 1, 8).unwrap();
        for y in 0..mh * r {
            for x in 0..mw * r {
                let mut acc = 0.0;
                for b in 0..bands {
                    acc += fused.get(y, x, b);
                }
                pan.set(y, x, 0, acc / bands as f32);
            }
        }
        let mut lr_pan = Image::zeros(mh, mw, 1, 8).unwrap();
        for y in 0..mh {
            for x in 0..mw {
                let mut acc = 0.0;
                for b in 0..bands {
                    acc += ms.get(y, x, b);
                }
                lr_pan.set(y, x, 0, acc / bands as f32);
            }
        }
        let (d_lambda, d_s, qnr) = qnr_suite(&fused, &ms, &pan, &lr_pan).unwrap();
        assert!(d_lambda < 1e-6, "{d_lambda}");
        assert!(d_s < 1e-6, "{d_s}");
        assert!((qnr - 1.0).abs() < 1e-5, "{qnr}");
    }

    #[test]
    fn scale_mismatch_is_an_error() {
        let fused = Image::zeros(32, 32, 4, 8).unwrap();
        let ms = Image::zeros(8, 8, 4, 8).unwrap();
        let pan = Image::zeros(16, 16, 1, 8).unwrap(); // wrong scale
        let lr_pan = Image::zeros(8, 8, 1, 8).unwrap();
        assert!(qnr_suite(&fused, &ms, &pan, &lr_pan).is_err());
    }
}
