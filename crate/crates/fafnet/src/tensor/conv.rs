//! Direct 2D convolution and affine kernels.
//!
//! Stride is fixed at 1. Kernels are 3x3 with padding 1 or 1x1 with no
//! padding, so spatial dims never change. The inner loops run over
//! contiguous row spans so the compiler can vectorize them; parallelism is
//! over independent output planes, which keeps accumulation order fixed and
//! results bit-reproducible.

use rayon::prelude::*;

use crate::tensor::data::Real;

/// Minimum per-plane work (output elements * kernel taps) before rayon is
/// worth the dispatch overhead.
const PAR_THRESHOLD: usize = 1 << 14;

/// out[n,co,y,x] = b[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * x[n,ci,y+ky-p,x+kx-p]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
    pad: usize,
    out: &mut [T],
) {
    let plane = h * w;
    let work = plane * cin * k * k;
    let run = |(idx, out_plane): (usize, &mut [T])| {
        let ni = idx / cout;
        let bi = idx % cout;
        out_plane.fill(bias[bi]);
        for ci in 0..cin {
            let x_plane = &x[(ni * cin + ci) * plane..(ni * cin + ci + 1) * plane];
            let w_base = ((bi * cin) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[w_base + ky * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    // output rows y where the input row y+ky-pad is valid
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad).saturating_sub(ky).min(h);
                    // output cols x where the input col x+kx-pad is valid
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let ix0 = x_lo + kx - pad;
                        let src = &x_plane[iy * w + ix0..iy * w + ix0 + (x_hi - x_lo)];
                        let dst = &mut out_plane[y * w + x_lo..y * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && n * cout > 1 {
        out.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        out.chunks_mut(plane).enumerate().for_each(run);
    }
}

/// Gradient w.r.t. the input: the adjoint of `conv2d_forward`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input<T: Real>(
    dy: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    pad: usize,
    dx: &mut [T],
) {
    let plane = h * w;
    let work = plane * cout * k * k;
    let run = |(idx, dx_plane): (usize, &mut [T])| {
        let ni = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let dy_plane = &dy[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            let w_base = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[w_base + ky * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    // dx[iy,ix] += dy[iy+pad-ky, ix+pad-kx] * wv over valid spans
                    let y_lo = ky.saturating_sub(pad);
                    let y_hi = (h + ky).saturating_sub(pad).min(h);
                    let x_lo = kx.saturating_sub(pad);
                    let x_hi = (w + kx).saturating_sub(pad).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for iy in y_lo..y_hi {
                        let oy = iy + pad - ky;
                        let ox0 = x_lo + pad - kx;
                        let src = &dy_plane[oy * w + ox0..oy * w + ox0 + (x_hi - x_lo)];
                        let dst = &mut dx_plane[iy * w + x_lo..iy * w + x_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    };
    if work >= PAR_THRESHOLD && n * cin > 1 {
        dx.par_chunks_mut(plane).enumerate().for_each(run);
    } else {
        dx.chunks_mut(plane).enumerate().for_each(run);
    }
}

/// Gradients w.r.t. weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_weight<T: Real>(
    x: &[T],
    dy: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    dw: &mut [T],
    db: &mut [T],
) {
    let plane = h * w;
    let kk = k * k;
    let run = |(pair, dw_slot): (usize, &mut [T])| {
        let co = pair / cin;
        let ci = pair % cin;
        for ni in 0..n {
            let x_plane = &x[(ni * cin + ci) * plane..(ni * cin + ci + 1) * plane];
            let dy_plane = &dy[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let y_lo = pad.saturating_sub(ky);
                    let y_hi = (h + pad).saturating_sub(ky).min(h);
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let iy = y + ky - pad;
                        let ix0 = x_lo + kx - pad;
                        let xs = &x_plane[iy * w + ix0..iy * w + ix0 + (x_hi - x_lo)];
                        let ds = &dy_plane[y * w + x_lo..y * w + x_hi];
                        for (a, b) in xs.iter().zip(ds) {
                            acc += *a * *b;
                        }
                    }
                    dw_slot[ky * k + kx] += acc;
                }
            }
        }
    };
    let work = plane * n * kk;
    if work >= PAR_THRESHOLD && cout * cin > 1 {
        dw.par_chunks_mut(kk).enumerate().for_each(run);
    } else {
        dw.chunks_mut(kk).enumerate().for_each(run);
    }
    for co in 0..cout {
        let mut acc = T::zero();
        for ni in 0..n {
            let dy_plane = &dy[(ni * cout + co) * plane..(ni * cout + co + 1) * plane];
            for v in dy_plane {
                acc += *v;
            }
        }
        db[co] += acc;
    }
}

/// out = z * w^T + b with z: (n, din), w: (dout, din), b: (dout).
pub fn linear_forward<T: Real>(
    z: &[T],
    n: usize,
    din: usize,
    weight: &[T],
    bias: &[T],
    dout: usize,
    out: &mut [T],
) {
    let run = |(i, row): (usize, &mut [T])| {
        let zr = &z[i * din..(i + 1) * din];
        for (o, slot) in row.iter_mut().enumerate() {
            let wr = &weight[o * din..(o + 1) * din];
            let mut acc = bias[o];
            for (a, b) in zr.iter().zip(wr) {
                acc += *a * *b;
            }
            *slot = acc;
        }
    };
    if n * dout * din >= PAR_THRESHOLD && n > 1 {
        out.par_chunks_mut(dout).enumerate().for_each(run);
    } else {
        out.chunks_mut(dout).enumerate().for_each(run);
    }
}

/// Gradients for `linear_forward`: dz = dy*w, dw = dy^T*z, db = column sums.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    z: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    weight: &[T],
    dout: usize,
    dz: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let run_dz = |(i, dz_row): (usize, &mut [T])| {
        let dy_row = &dy[i * dout..(i + 1) * dout];
        for (o, &g) in dy_row.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            let wr = &weight[o * din..(o + 1) * din];
            for (d, wv) in dz_row.iter_mut().zip(wr) {
                *d += g * *wv;
            }
        }
    };
    if n * dout * din >= PAR_THRESHOLD && n > 1 {
        dz.par_chunks_mut(din).enumerate().for_each(run_dz);
    } else {
        dz.chunks_mut(din).enumerate().for_each(run_dz);
    }

    let run_dw = |(o, dw_row): (usize, &mut [T])| {
        for i in 0..n {
            let g = dy[i * dout + o];
            if g == T::zero() {
                continue;
            }
            let zr = &z[i * din..(i + 1) * din];
            for (d, zv) in dw_row.iter_mut().zip(zr) {
                *d += g * *zv;
            }
        }
    };
    if n * dout * din >= PAR_THRESHOLD && dout > 1 {
        dw.par_chunks_mut(din).enumerate().for_each(run_dw);
    } else {
        dw.chunks_mut(din).enumerate().for_each(run_dw);
    }

    for o in 0..dout {
        let mut acc = T::zero();
        for i in 0..n {
            acc += dy[i * dout + o];
        }
        db[o] += acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nested-loop reference convolution, written independently of the
    /// span-based kernel above.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &[f64],
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        weight: &[f64],
        bias: &[f64],
        cout: usize,
        k: usize,
        pad: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; n * cout * h * w];
        for ni in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xp in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad as isize;
                                    let ix = xp as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += weight[((co * cin + ci) * k + ky) * k + kx]
                                        * x[((ni * cin + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        out[((ni * cout + co) * h + y) * w + xp] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_reference_on_random_input() {
        let mut seed = 0x12345u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let (n, cin, cout, h, w, k, pad) = (2, 3, 4, 5, 7, 3, 1);
        let x: Vec<f64> = (0..n * cin * h * w).map(|_| next()).collect();
        let wt: Vec<f64> = (0..cout * cin * k * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..cout).map(|_| next()).collect();
        let mut out = vec![0.0; n * cout * h * w];
        conv2d_forward(&x, n, cin, h, w, &wt, &b, cout, k, pad, &mut out);
        let reference = conv_reference(&x, n, cin, h, w, &wt, &b, cout, k, pad);
        for (a, r) in out.iter().zip(&reference) {
            assert!((a - r).abs() < 1e-12, "{a} vs {r}");
        }
    }

    #[test]
    fn all_ones_kernel_on_two_by_two() {
        // 2x2 input [[1,2],[3,4]], 3x3 all-ones filter, zero bias, pad 1:
        // every output equals the full sum 10.
        let x = [1.0, 2.0, 3.0, 4.0];
        let wt = [1.0f64; 9];
        let b = [0.0];
        let mut out = [0.0; 4];
        conv2d_forward(&x, 1, 1, 2, 2, &wt, &b, 1, 3, 1, &mut out);
        assert_eq!(out, [10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn linear_matches_hand_product() {
        // z=[[1,2]], w=[[3,4]], b=[5] -> [[16]]
        let z = [1.0, 2.0];
        let w = [3.0, 4.0];
        let b = [5.0];
        let mut out = [0.0f64; 1];
        linear_forward(&z, 1, 2, &w, &b, 1, &mut out);
        assert_eq!(out[0], 16.0);
    }
}
