//! Hypercomplex universal image quality index (Q4/Q8 family).
//!
//! Each pixel's band vector is treated as one 2^n-dimensional hypercomplex
//! number built by the Cayley-Dickson construction (reals -> complex ->
//! quaternions -> octonions). Per tile, the index is
//!
//!   Q = 4 |cov(z1, z2)| |mean(z1)| |mean(z2)|
//!       / ((var(z1) + var(z2)) (|mean(z1)|^2 + |mean(z2)|^2))
//!
//! where cov is the hypercomplex covariance E[z1 conj(z2)] - m1 conj(m2),
//! var the (real) mean squared modulus minus squared mean modulus, and
//! |.| the modulus. Tiles average into the final score.

use crate::data::image::Image;
use crate::error::{arg_err, shape_err, Result};

/// Cayley-Dickson product: (a, b)(c, d) = (ac - d*b, da + bc*), recursing
/// down to real multiplication. For dimension 4 this yields the Hamilton
/// quaternion table (e1 e2 = e3, e2 e3 = e1, e3 e1 = e2).
pub fn cd_mul(a: &[f64], b: &[f64], out: &mut [f64]) {
    let n = a.len();
    debug_assert_eq!(b.len(), n);
    debug_assert_eq!(out.len(), n);
    if n == 1 {
        out[0] = a[0] * b[0];
        return;
    }
    let h = n / 2;
    let (a1, a2) = a.split_at(h);
    let (c1, c2) = b.split_at(h);
    let mut t1 = vec![0.0; h];
    let mut t2 = vec![0.0; h];
    let mut buf = vec![0.0; h];

    // first half: a1*c1 - conj(c2)*a2
    cd_mul(a1, c1, &mut t1);
    let c2_conj = cd_conj_vec(c2);
    cd_mul(&c2_conj, a2, &mut buf);
    for i in 0..h {
        t1[i] -= buf[i];
    }
    // second half: c2*a1 + a2*conj(c1)
    cd_mul(c2, a1, &mut t2);
    let c1_conj = cd_conj_vec(c1);
    cd_mul(a2, &c1_conj, &mut buf);
    for i in 0..h {
        t2[i] += buf[i];
    }
    out[..h].copy_from_slice(&t1);
    out[h..].copy_from_slice(&t2);
}

fn cd_conj_vec(a: &[f64]) -> Vec<f64> {
    let mut out = a.to_vec();
    for v in out.iter_mut().skip(1) {
        *v = -*v;
    }
    out
}

/// Conjugate in place: negate every component but the real one.
pub fn cd_conj(a: &mut [f64]) {
    for v in a.iter_mut().skip(1) {
        *v = -*v;
    }
}

pub fn cd_modulus(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Q over one tile given the two pixel streams as band-major slices.
/// `pixels[p * bands + b]` holds band b of pixel p.
fn q_tile(z1: &[f64], z2: &[f64], bands: usize) -> f64 {
    let count = z1.len() / bands;
    let nf = count as f64;

    let mut m1 = vec![0.0; bands];
    let mut m2 = vec![0.0; bands];
    for p in 0..count {
        for b in 0..bands {
            m1[b] += z1[p * bands + b];
            m2[b] += z2[p * bands + b];
        }
    }
    for b in 0..bands {
        m1[b] /= nf;
        m2[b] /= nf;
    }

    // hypercomplex covariance and real variances
    let mut cov = vec![0.0; bands];
    let mut prod = vec![0.0; bands];
    let mut e_sq1 = 0.0;
    let mut e_sq2 = 0.0;
    for p in 0..count {
        let p1 = &z1[p * bands..(p + 1) * bands];
        let p2c = cd_conj_vec(&z2[p * bands..(p + 1) * bands]);
        cd_mul(p1, &p2c, &mut prod);
        for b in 0..bands {
            cov[b] += prod[b];
        }
        e_sq1 += p1.iter().map(|v| v * v).sum::<f64>();
        e_sq2 += z2[p * bands..(p + 1) * bands].iter().map(|v| v * v).sum::<f64>();
    }
    for v in cov.iter_mut() {
        *v /= nf;
    }
    let m2c = cd_conj_vec(&m2);
    let mut mean_prod = vec![0.0; bands];
    cd_mul(&m1, &m2c, &mut mean_prod);
    for b in 0..bands {
        cov[b] -= mean_prod[b];
    }

    let mod_m1 = cd_modulus(&m1);
    let mod_m2 = cd_modulus(&m2);
    let var1 = e_sq1 / nf - mod_m1 * mod_m1;
    let var2 = e_sq2 / nf - mod_m2 * mod_m2;

    if var1 <= 0.0 && var2 <= 0.0 {
        return if z1 == z2 { 1.0 } else { 0.0 };
    }
    if var1 <= 0.0 || var2 <= 0.0 {
        return 0.0;
    }
    let denom = (var1 + var2) * (mod_m1 * mod_m1 + mod_m2 * mod_m2);
    if denom == 0.0 {
        return 0.0;
    }
    4.0 * cd_modulus(&cov) * mod_m1 * mod_m2 / denom
}

/// Hypercomplex quality index averaged over non-overlapping `block` x
/// `block` tiles (the tile shrinks if the image is smaller than the
/// nominal block).
pub fn q2n(reference: &Image, fused: &Image, block: usize) -> Result<f64> {
    if reference.height() != fused.height()
        || reference.width() != fused.width()
        || reference.bands() != fused.bands()
    {
        return Err(shape_err(
            "q2n",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                reference.height(),
                reference.width(),
                reference.bands(),
                fused.height(),
                fused.width(),
                fused.bands()
            ),
        ));
    }
    let bands = reference.bands();
    if !bands.is_power_of_two() {
        return Err(arg_err("q2n", format!("band count must be a power of two, got {bands}")));
    }
    if block < 2 {
        return Err(arg_err("q2n", format!("block must be >= 2, got {block}")));
    }
    let (h, w) = (reference.height(), reference.width());
    let block = block.min(h).min(w);
    let (ty, tx) = (h / block, w / block);
    if ty == 0 || tx == 0 {
        return Err(shape_err("q2n", format!("image {h}x{w} smaller than block {block}")));
    }

    let gather = |img: &Image, by: usize, bx: usize, buf: &mut Vec<f64>| {
        buf.clear();
        for y in 0..block {
            for x in 0..block {
                for b in 0..bands {
                    buf.push(img.get(by * block + y, bx * block + x, b) as f64);
                }
            }
        }
    };

    let mut acc = 0.0;
    let mut buf1 = Vec::with_capacity(block * block * bands);
    let mut buf2 = Vec::with_capacity(block * block * bands);
    for by in 0..ty {
        for bx in 0..tx {
            gather(reference, by, bx, &mut buf1);
            gather(fused, by, bx, &mut buf2);
            acc += q_tile(&buf1, &buf2, bands);
        }
    }
    Ok(acc / (ty * tx) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cd_dim4_is_hamilton() {
        let e = |i: usize| {
            let mut v = [0.0; 4];
            v[i] = 1.0;
            v
        };
        let mut out = [0.0; 4];
        cd_mul(&e(1), &e(2), &mut out);
        assert_eq!(out, e(3)); // i j = k
        cd_mul(&e(2), &e(3), &mut out);
        assert_eq!(out, e(1)); // j k = i
        cd_mul(&e(3), &e(1), &mut out);
        assert_eq!(out, e(2)); // k i = j
        cd_mul(&e(2), &e(1), &mut out);
        let mut neg = e(3);
        neg[3] = -1.0;
        assert_eq!(out[3], -1.0); // j i = -k
        let _ = neg;
    }

    #[test]
    fn cd_norm_is_multiplicative_dim8() {
        // octonions are a composition algebra: |ab| = |a||b|
        let a: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..8).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut out = vec![0.0; 8];
        cd_mul(&a, &b, &mut out);
        let lhs = cd_modulus(&out);
        let rhs = cd_modulus(&a) * cd_modulus(&b);
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn cd_times_own_conjugate_is_real() {
        let a = [0.3, -1.2, 0.7, 2.1];
        let mut conj = a;
        cd_conj(&mut conj);
        let mut out = [0.0; 4];
        cd_mul(&a, &conj, &mut out);
        let norm_sq: f64 = a.iter().map(|v| v * v).sum();
        assert!((out[0] - norm_sq).abs() < 1e-12);
        for v in &out[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    fn textured(h: usize, w: usize, bands: usize, salt: u64) -> Image {
        let mut img = Image::zeros(h, w, bands, 8).unwrap();
        let mut state = salt.wrapping_add(1);
        for b in 0..bands {
            for y in 0..h {
                for x in 0..w {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let v = ((state >> 33) % 200) as f32 + 5.0;
                    img.set(y, x, b, v);
                }
            }
        }
        img
    }

    #[test]
    fn identical_images_score_one() {
        let img = textured(32, 32, 4, 7);
        let q = q2n(&img, &img, 32).unwrap();
        assert!((q - 1.0).abs() < 1e-9, "{q}");
        let img8 = textured(32, 32, 8, 9);
        let q8 = q2n(&img8, &img8, 32).unwrap();
        assert!((q8 - 1.0).abs() < 1e-9, "{q8}");
    }

    #[test]
    fn constant_equal_images_use_degenerate_rule() {
        let img = Image::constant(32, 32, 4, 8, 42.0).unwrap();
        assert_eq!(q2n(&img, &img, 32).unwrap(), 1.0);
        let other = Image::constant(32, 32, 4, 8, 43.0).unwrap();
        assert_eq!(q2n(&img, &other, 32).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_power_of_two_bands() {
        let img = textured(8, 8, 3, 1);
        assert!(q2n(&img, &img, 8).is_err());
    }
}
