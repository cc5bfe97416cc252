//! Procedural multi-band scenes for demos and end-to-end tests.
//!
//! Each scene is a patchwork of two spectral "materials" separated by
//! sharp boundaries, modulated by a shared textured intensity field
//! (smooth blobs plus oriented gratings). Spectral direction therefore
//! flips abruptly at material edges — the property that makes plain
//! upsampling blend signatures there — while the panchromatic image (the
//! band mean at full resolution) sees every boundary.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::Image;
use crate::error::{arg_err, Result};

/// Generate an aligned (multispectral, panchromatic) pair. `ms_size` is the
/// multispectral side length; the panchromatic image is `ratio` times
/// larger. Sample values stay inside [0.08, 0.92] of the digital range so
/// a tanh output head can represent them.
pub fn synth_scene(
    seed: u64,
    ms_size: usize,
    bands: usize,
    ratio: usize,
    bit_depth: u16,
) -> Result<(Image, Image)> {
    if ms_size == 0 || bands == 0 || ratio == 0 {
        return Err(arg_err("synth_scene", "sizes, bands and ratio must be positive"));
    }
    let size = ms_size * ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let fsize = size as f64;

    // shared textured intensity: smooth blobs plus oriented gratings
    let mut texture = vec![0.0f64; n];
    for _ in 0..8 {
        let cy = rng.gen_range(0.0..fsize);
        let cx = rng.gen_range(0.0..fsize);
        let radius = rng.gen_range(0.08..0.3) * fsize;
        let amp = rng.gen_range(0.4..1.0);
        for y in 0..size {
            for x in 0..size {
                let d2 = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (radius * radius);
                texture[y * size + x] += amp * (-d2).exp();
            }
        }
    }
    for _ in 0..3 {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let freq = rng.gen_range(0.02..0.1);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(0.2..0.5);
        let (s, c) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let t = (x as f64 * c + y as f64 * s) * freq * std::f64::consts::TAU + phase;
                texture[y * size + x] += amp * t.sin();
            }
        }
    }
    let (mut tlo, mut thi) = (f64::MAX, f64::MIN);
    for v in &texture {
        tlo = tlo.min(*v);
        thi = thi.max(*v);
    }
    let tspan = (thi - tlo).max(1e-9);
    for v in texture.iter_mut() {
        *v = 0.35 + 0.65 * (*v - tlo) / tspan;
    }

    // material mask: hard-ish boundaries from a low-frequency field
    let mut mask = vec![0.0f64; n];
    {
        let fy = rng.gen_range(0.01..0.03);
        let fx = rng.gen_range(0.01..0.03);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let sharp = rng.gen_range(20.0..60.0);
        let (s, c) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 * c + y as f64 * s;
                let v = -(x as f64) * s + y as f64 * c;
                let field = (u * fy * std::f64::consts::TAU).sin()
                    + (v * fx * std::f64::consts::TAU + phase).cos();
                mask[y * size + x] = 0.5 * (1.0 + (sharp * field).tanh());
            }
        }
    }

    // two spectral signatures, guaranteed to differ in direction
    let sig_a: Vec<f64> = (0..bands).map(|_| rng.gen_range(0.2..1.0)).collect();
    let sig_b: Vec<f64> = (0..bands)
        .map(|b| {
            let flip = rng.gen_range(0.2..1.0);
            // anti-correlate alternating bands so the signatures are not
            // simply rescaled copies of each other
            if b % 2 == 0 {
                flip * 0.25
            } else {
                flip
            }
        })
        .collect();

    let max = (2f64.powi(bit_depth as i32) - 1.0) as f32;
    let mut ms_full = Image::zeros(size, size, bands, bit_depth)?;
    for b in 0..bands {
        let plane = ms_full.band_mut(b);
        for i in 0..n {
            let sig = mask[i] * sig_a[b] + (1.0 - mask[i]) * sig_b[b];
            plane[i] = (sig * texture[i]) as f32;
        }
    }

    // rescale all bands jointly into [0.08, 0.92] of the range
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for v in ms_full.samples() {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = (hi - lo).max(1e-6);
    for v in ms_full.samples_mut() {
        *v = (0.08 + 0.84 * (*v - lo) / span) * max;
    }

    // panchromatic = band mean at full resolution
    let mut pan = Image::zeros(size, size, 1, bit_depth)?;
    for i in 0..n {
        let mut acc = 0.0f64;
        for b in 0..bands {
            acc += ms_full.band(b)[i] as f64;
        }
        pan.band_mut(0)[i] = (acc / bands as f64) as f32;
    }

    // the multispectral image is the scene at its native (coarser) grid:
    // area-average each ratio x ratio cell
    let mut ms = Image::zeros(ms_size, ms_size, bands, bit_depth)?;
    for b in 0..bands {
        let src = ms_full.band(b);
        let dst = ms.band_mut(b);
        for y in 0..ms_size {
            for x in 0..ms_size {
                let mut acc = 0.0f64;
                for dy in 0..ratio {
                    for dx in 0..ratio {
                        acc += src[(y * ratio + dy) * size + (x * ratio + dx)] as f64;
                    }
                }
                dst[y * ms_size + x] = (acc / (ratio * ratio) as f64) as f32;
            }
        }
    }

    ms.sensor = "synthetic".to_string();
    pan.sensor = "synthetic".to_string();
    Ok((ms, pan))
}

/// Generate a full on-disk dataset: scenes are synthesized, degraded by
/// the reduced-resolution protocol, written as FAFIMG1 files, and recorded
/// in a manifest with content hashes. Returns the manifest path.
#[allow(clippy::too_many_arguments)]
pub fn write_synthetic_dataset(
    out_dir: &std::path::Path,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    ms_size: usize,
    bands: usize,
    cfg: &crate::data::pipeline::DatasetConfig,
    seed: u64,
) -> Result<std::path::PathBuf> {
    use crate::data::image::write_image;
    use crate::data::manifest::{DatasetManifest, PairEntry, Split};
    use crate::data::pipeline::degrade_wald;

    std::fs::create_dir_all(out_dir)?;
    let mut manifest = DatasetManifest::new(cfg.clone());
    let splits: Vec<Split> = std::iter::repeat(Split::Train)
        .take(n_train)
        .chain(std::iter::repeat(Split::Val).take(n_val))
        .chain(std::iter::repeat(Split::Test).take(n_test))
        .collect();
    for (i, split) in splits.iter().enumerate() {
        let name = format!("scene{i:03}");
        let (ms, pan) = synth_scene(seed.wrapping_add(i as u64), ms_size, bands, cfg.ratio, cfg.bit_depth)?;
        let (lr_ms, lr_pan, reference) = degrade_wald(&ms, &pan, cfg)?;
        let entry = PairEntry {
            name: name.clone(),
            split: *split,
            lr_ms: format!("{name}.lrms.fafimg"),
            lr_pan: format!("{name}.lrpan.fafimg"),
            reference: format!("{name}.ref.fafimg"),
            pan: format!("{name}.pan.fafimg"),
        };
        write_image(&out_dir.join(&entry.lr_ms), &lr_ms)?;
        write_image(&out_dir.join(&entry.lr_pan), &lr_pan)?;
        write_image(&out_dir.join(&entry.reference), &reference)?;
        write_image(&out_dir.join(&entry.pan), &pan)?;
        manifest.add_pair(out_dir, entry)?;
    }
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
