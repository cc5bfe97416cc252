//! Separable 2D discrete wavelet transform and its inverse.
//!
//! Filters are length-2 banks initialized to orthonormal Haar. The analysis
//! pass correlates rows then columns with stride 2; per input channel the
//! four sub-bands come out as LL plus a detail stack in (LH, HL, HH) order,
//! where the first letter is the vertical filter and the second the
//! horizontal one. The transform is linear in the input and bilinear in
//! (input, filters), so both are differentiable.

use crate::error::{arg_err, shape_err, Result};
use crate::tensor::data::{FeatureMap, Real, TensorData};

/// Analysis and synthesis filter pairs for one DWT/IDWT layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank<T> {
    pub analysis_low: [T; 2],
    pub analysis_high: [T; 2],
    pub synthesis_low: [T; 2],
    pub synthesis_high: [T; 2],
    pub learnable: bool,
}

/// One decomposition level: `lf` is (N, C, H/2, W/2) and `hf` stacks the
/// three detail sub-bands per input channel, giving (N, 3C, H/2, W/2).
/// `orig_hw` remembers the pre-padding size so the inverse can crop.
#[derive(Clone, Debug)]
pub struct WaveletBands<T> {
    pub lf: FeatureMap<T>,
    pub hf: FeatureMap<T>,
    pub orig_hw: (usize, usize),
}

/// The orthonormal Haar bank: low = (1, 1)/sqrt(2), high = (1, -1)/sqrt(2),
/// synthesis tied to analysis.
pub fn haar_bank<T: Real>() -> FilterBank<T> {
    let s = T::of(std::f64::consts::FRAC_1_SQRT_2);
    FilterBank {
        analysis_low: [s, s],
        analysis_high: [s, -s],
        synthesis_low: [s, s],
        synthesis_high: [s, -s],
        learnable: false,
    }
}

/// Packed analysis layout: channels [0, c) hold LL, channels [c, 4c) hold
/// the interleaved detail stack [LH_0, HL_0, HH_0, LH_1, ...].
pub(crate) fn dwt2_packed_shape(n: usize, c: usize, h: usize, w: usize) -> [usize; 4] {
    [n, 4 * c, h / 2, w / 2]
}

/// Forward analysis into the packed layout. `h` and `w` must be even.
pub(crate) fn dwt2_kernel<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    low: &[T],
    high: &[T],
    out: &mut [T],
) {
    let (hh, hw) = (h / 2, w / 2);
    let in_plane = h * w;
    let out_plane = hh * hw;
    let (l0, l1, g0, g1) = (low[0], low[1], high[0], high[1]);
    for ni in 0..n {
        for ci in 0..c {
            let xp = &x[(ni * c + ci) * in_plane..(ni * c + ci + 1) * in_plane];
            let base = ni * 4 * c * out_plane;
            let ll = base + ci * out_plane;
            let lh = base + (c + 3 * ci) * out_plane;
            let hl = base + (c + 3 * ci + 1) * out_plane;
            let hh_off = base + (c + 3 * ci + 2) * out_plane;
            for i in 0..hh {
                let r0 = &xp[(2 * i) * w..(2 * i) * w + w];
                let r1 = &xp[(2 * i + 1) * w..(2 * i + 1) * w + w];
                for j in 0..hw {
                    let (a, b) = (r0[2 * j], r0[2 * j + 1]);
                    let (cc, d) = (r1[2 * j], r1[2 * j + 1]);
                    // horizontal pass on both rows, then vertical pass
                    let r0l = l0 * a + l1 * b;
                    let r0h = g0 * a + g1 * b;
                    let r1l = l0 * cc + l1 * d;
                    let r1h = g0 * cc + g1 * d;
                    let o = i * hw + j;
                    out[ll + o] = l0 * r0l + l1 * r1l;
                    out[lh + o] = l0 * r0h + l1 * r1h;
                    out[hl + o] = g0 * r0l + g1 * r1l;
                    out[hh_off + o] = g0 * r0h + g1 * r1h;
                }
            }
        }
    }
}

/// Adjoint/gradient of `dwt2_kernel`: scatters sub-band cotangents back to
/// the input and accumulates filter gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dwt2_backward_kernel<T: Real>(
    x: &[T],
    d_out: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    low: &[T],
    high: &[T],
    dx: &mut [T],
    d_low: &mut [T],
    d_high: &mut [T],
) {
    let (hh, hw) = (h / 2, w / 2);
    let in_plane = h * w;
    let out_plane = hh * hw;
    for ni in 0..n {
        for ci in 0..c {
            let x_base = (ni * c + ci) * in_plane;
            let base = ni * 4 * c * out_plane;
            // (vertical filter is low?, horizontal filter is low?, packed offset)
            let subbands = [
                (true, true, base + ci * out_plane),
                (true, false, base + (c + 3 * ci) * out_plane),
                (false, true, base + (c + 3 * ci + 1) * out_plane),
                (false, false, base + (c + 3 * ci + 2) * out_plane),
            ];
            for (v_low, h_low, off) in subbands {
                let p: [T; 2] = if v_low { [low[0], low[1]] } else { [high[0], high[1]] };
                let q: [T; 2] = if h_low { [low[0], low[1]] } else { [high[0], high[1]] };
                for i in 0..hh {
                    for j in 0..hw {
                        let g = d_out[off + i * hw + j];
                        if g == T::zero() {
                            continue;
                        }
                        let cell = [
                            x[x_base + (2 * i) * w + 2 * j],
                            x[x_base + (2 * i) * w + 2 * j + 1],
                            x[x_base + (2 * i + 1) * w + 2 * j],
                            x[x_base + (2 * i + 1) * w + 2 * j + 1],
                        ];
                        for u in 0..2 {
                            for v in 0..2 {
                                dx[x_base + (2 * i + u) * w + 2 * j + v] += g * p[u] * q[v];
                            }
                        }
                        let dp0 = g * (q[0] * cell[0] + q[1] * cell[1]);
                        let dp1 = g * (q[0] * cell[2] + q[1] * cell[3]);
                        let dq0 = g * (p[0] * cell[0] + p[1] * cell[2]);
                        let dq1 = g * (p[0] * cell[1] + p[1] * cell[3]);
                        let dp = if v_low { &mut *d_low } else { &mut *d_high };
                        dp[0] += dp0;
                        dp[1] += dp1;
                        let dq = if h_low { &mut *d_low } else { &mut *d_high };
                        dq[0] += dq0;
                        dq[1] += dq1;
                    }
                }
            }
        }
    }
}

/// Synthesis: lf (N,C,h,w) + hf (N,3C,h,w) -> (N,C,2h,2w).
#[allow(clippy::too_many_arguments)]
pub(crate) fn idwt2_kernel<T: Real>(
    lf: &[T],
    hf: &[T],
    n: usize,
    c: usize,
    hh: usize,
    hw: usize,
    low: &[T],
    high: &[T],
    out: &mut [T],
) {
    let out_w = 2 * hw;
    let band_plane = hh * hw;
    let out_plane = 4 * band_plane;
    let (l0, l1, g0, g1) = (low[0], low[1], high[0], high[1]);
    for ni in 0..n {
        for ci in 0..c {
            let ll = &lf[(ni * c + ci) * band_plane..(ni * c + ci + 1) * band_plane];
            let hf_base = (ni * 3 * c + 3 * ci) * band_plane;
            let lh = &hf[hf_base..hf_base + band_plane];
            let hl = &hf[hf_base + band_plane..hf_base + 2 * band_plane];
            let hh_band = &hf[hf_base + 2 * band_plane..hf_base + 3 * band_plane];
            let op = &mut out[(ni * c + ci) * out_plane..(ni * c + ci + 1) * out_plane];
            for i in 0..hh {
                for j in 0..hw {
                    let o = i * hw + j;
                    let (sll, slh, shl, shh) = (ll[o], lh[o], hl[o], hh_band[o]);
                    // vertical-low row pair and vertical-high contributions
                    let top = i * 2 * out_w + 2 * j;
                    let bot = top + out_w;
                    op[top] = l0 * (l0 * sll + g0 * shl) + g0 * (l0 * slh + g0 * shh);
                    op[top + 1] = l1 * (l0 * sll + g0 * shl) + g1 * (l0 * slh + g0 * shh);
                    op[bot] = l0 * (l1 * sll + g1 * shl) + g0 * (l1 * slh + g1 * shh);
                    op[bot + 1] = l1 * (l1 * sll + g1 * shl) + g1 * (l1 * slh + g1 * shh);
                }
            }
        }
    }
}

/// Gradient of `idwt2_kernel` w.r.t. both band inputs and the filters.
#[allow(clippy::too_many_arguments)]
pub(crate) fn idwt2_backward_kernel<T: Real>(
    lf: &[T],
    hf: &[T],
    d_out: &[T],
    n: usize,
    c: usize,
    hh: usize,
    hw: usize,
    low: &[T],
    high: &[T],
    d_lf: &mut [T],
    d_hf: &mut [T],
    d_low: &mut [T],
    d_high: &mut [T],
) {
    let out_w = 2 * hw;
    let band_plane = hh * hw;
    let out_plane = 4 * band_plane;
    for ni in 0..n {
        for ci in 0..c {
            let lf_base = (ni * c + ci) * band_plane;
            let hf_base = (ni * 3 * c + 3 * ci) * band_plane;
            let dop = &d_out[(ni * c + ci) * out_plane..(ni * c + ci + 1) * out_plane];
            // sub-band order within this channel: LL, LH, HL, HH
            let offsets = [lf_base, hf_base, hf_base + band_plane, hf_base + 2 * band_plane];
            let selectors = [(true, true), (true, false), (false, true), (false, false)];
            for s in 0..4 {
                let (v_low, h_low) = selectors[s];
                let p: [T; 2] = if v_low { [low[0], low[1]] } else { [high[0], high[1]] };
                let q: [T; 2] = if h_low { [low[0], low[1]] } else { [high[0], high[1]] };
                let src = if s == 0 { &*lf } else { &*hf };
                let dst = if s == 0 { &mut *d_lf } else { &mut *d_hf };
                for i in 0..hh {
                    for j in 0..hw {
                        let o = offsets[s] + i * hw + j;
                        let top = i * 2 * out_w + 2 * j;
                        let cell = [dop[top], dop[top + 1], dop[top + out_w], dop[top + out_w + 1]];
                        // d band = sum_{u,v} p[u] q[v] dy[2i+u, 2j+v]
                        let mut acc = T::zero();
                        for u in 0..2 {
                            for v in 0..2 {
                                acc += p[u] * q[v] * cell[2 * u + v];
                            }
                        }
                        dst[o] += acc;
                        let sv = src[o];
                        if sv != T::zero() {
                            let dp0 = sv * (q[0] * cell[0] + q[1] * cell[1]);
                            let dp1 = sv * (q[0] * cell[2] + q[1] * cell[3]);
                            let dq0 = sv * (p[0] * cell[0] + p[1] * cell[2]);
                            let dq1 = sv * (p[0] * cell[1] + p[1] * cell[3]);
                            let dp = if v_low { &mut *d_low } else { &mut *d_high };
                            dp[0] += dp0;
                            dp[1] += dp1;
                            let dq = if h_low { &mut *d_low } else { &mut *d_high };
                            dq[0] += dq0;
                            dq[1] += dq1;
                        }
                    }
                }
            }
        }
    }
}

/// Reflect-pad the trailing edge by one row/column where a dimension is odd.
fn pad_even<T: Real>(x: &FeatureMap<T>) -> Result<(FeatureMap<T>, usize, usize)> {
    let (n, c, h, w) = x.dims4("dwt2")?;
    let (ph, pw) = (h + h % 2, w + w % 2);
    if ph == h && pw == w {
        return Ok((x.clone(), h, w));
    }
    let mut out = TensorData::zeros(&[n, c, ph, pw]);
    let src = x.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        for i in 0..ph {
            let si = if i < h { i } else { 2 * h - 2 - i }; // reflect without repeating the edge
            for j in 0..pw {
                let sj = if j < w { j } else { 2 * w - 2 - j };
                dst[nc * ph * pw + i * pw + j] = src[nc * h * w + si * w + sj];
            }
        }
    }
    Ok((out, h, w))
}

/// One analysis level. Odd spatial dims are reflect-padded first; the
/// original size is recorded on the result so `idwt2` can crop.
pub fn dwt2<T: Real>(x: &FeatureMap<T>, bank: &FilterBank<T>) -> Result<WaveletBands<T>> {
    let (n, c, h0, w0) = x.dims4("dwt2")?;
    if h0 == 0 || w0 == 0 || n == 0 || c == 0 {
        return Err(arg_err("dwt2", format!("zero-sized input {:?}", x.shape())));
    }
    let (padded, oh, ow) = pad_even(x)?;
    let (_, _, h, w) = padded.dims4("dwt2")?;
    let mut packed = TensorData::zeros(&dwt2_packed_shape(n, c, h, w));
    dwt2_kernel(padded.data(), n, c, h, w, &bank.analysis_low, &bank.analysis_high, packed.data_mut());
    let (hh, hw) = (h / 2, w / 2);
    let plane = hh * hw;
    let mut lf = TensorData::zeros(&[n, c, hh, hw]);
    let mut hf = TensorData::zeros(&[n, 3 * c, hh, hw]);
    let src = packed.data();
    for ni in 0..n {
        let base = ni * 4 * c * plane;
        lf.data_mut()[ni * c * plane..(ni + 1) * c * plane]
            .copy_from_slice(&src[base..base + c * plane]);
        hf.data_mut()[ni * 3 * c * plane..(ni + 1) * 3 * c * plane]
            .copy_from_slice(&src[base + c * plane..base + 4 * c * plane]);
    }
    Ok(WaveletBands { lf, hf, orig_hw: (oh, ow) })
}

/// One synthesis level; crops to the recorded pre-padding size.
pub fn idwt2<T: Real>(bands: &WaveletBands<T>, bank: &FilterBank<T>) -> Result<FeatureMap<T>> {
    let (n, c, hh, hw) = bands.lf.dims4("idwt2")?;
    let (hn, hc, hhh, hhw) = bands.hf.dims4("idwt2")?;
    if hn != n || hc != 3 * c || hhh != hh || hhw != hw {
        return Err(shape_err(
            "idwt2",
            format!("hf shape {:?} incompatible with lf shape {:?} (need 3x channels)", bands.hf.shape(), bands.lf.shape()),
        ));
    }
    let mut out = TensorData::zeros(&[n, c, 2 * hh, 2 * hw]);
    idwt2_kernel(
        bands.lf.data(),
        bands.hf.data(),
        n,
        c,
        hh,
        hw,
        &bank.synthesis_low,
        &bank.synthesis_high,
        out.data_mut(),
    );
    let (oh, ow) = bands.orig_hw;
    if oh == 2 * hh && ow == 2 * hw {
        return Ok(out);
    }
    let mut cropped = TensorData::zeros(&[n, c, oh, ow]);
    let (ph, pw) = (2 * hh, 2 * hw);
    let src = out.data();
    let dst = cropped.data_mut();
    for nc in 0..n * c {
        for i in 0..oh {
            dst[nc * oh * ow + i * ow..nc * oh * ow + (i + 1) * ow]
                .copy_from_slice(&src[nc * ph * pw + i * pw..nc * ph * pw + i * pw + ow]);
        }
    }
    Ok(cropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::data::feature_map;

    fn haar() -> FilterBank<f64> {
        haar_bank()
    }

    #[test]
    fn haar_bank_identities() {
        let b = haar();
        let sum_low: f64 = b.analysis_low.iter().sum();
        let sum_high: f64 = b.analysis_high.iter().sum();
        let dot: f64 = b.analysis_low.iter().zip(&b.analysis_high).map(|(a, b)| a * b).sum();
        assert!((sum_low - 2f64.sqrt()).abs() < 1e-12);
        assert!(sum_high.abs() < 1e-12);
        assert!(dot.abs() < 1e-12);
    }

    #[test]
    fn two_by_two_block_subbands() {
        let x = feature_map(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bands = dwt2(&x, &haar()).unwrap();
        assert!((bands.lf.data()[0] - 5.0).abs() < 1e-12, "LL");
        assert!((bands.hf.data()[0] - -1.0).abs() < 1e-12, "LH");
        assert!((bands.hf.data()[1] - -2.0).abs() < 1e-12, "HL");
        assert!(bands.hf.data()[2].abs() < 1e-12, "HH");
    }

    #[test]
    fn constant_image_has_no_detail() {
        let c = 3.25;
        let x = feature_map(1, 2, 4, 4, vec![c; 32]).unwrap();
        let bands = dwt2(&x, &haar()).unwrap();
        for v in bands.lf.data() {
            assert!((v - 2.0 * c).abs() < 1e-12);
        }
        for v in bands.hf.data() {
            assert!(v.abs() < 1e-12);
        }
        // and the inverse restores the constant
        let back = idwt2(&bands, &haar()).unwrap();
        for v in back.data() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_of_hand_subbands() {
        let lf = feature_map(1, 1, 1, 1, vec![5.0]).unwrap();
        let hf = feature_map(1, 3, 1, 1, vec![-1.0, -2.0, 0.0]).unwrap();
        let bands = WaveletBands { lf, hf, orig_hw: (2, 2) };
        let x = idwt2(&bands, &haar()).unwrap();
        let expect = [1.0, 2.0, 3.0, 4.0];
        for (a, b) in x.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_odd_dims_via_reflect_pad() {
        let mut v = 0.0f64;
        let data: Vec<f64> = (0..5 * 7).map(|_| {
            v += 0.37;
            (v * 13.0).sin()
        }).collect();
        let x = feature_map(1, 1, 5, 7, data).unwrap();
        let bands = dwt2(&x, &haar()).unwrap();
        assert_eq!(bands.lf.shape(), &[1, 1, 3, 4]);
        let back = idwt2(&bands, &haar()).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn parseval_energy_preserved() {
        let mut v = 0.5f64;
        let data: Vec<f64> = (0..2 * 3 * 8 * 6).map(|_| {
            v = (v * 97.0 + 0.123).fract();
            v - 0.5
        }).collect();
        let x = feature_map(2, 3, 8, 6, data).unwrap();
        let bands = dwt2(&x, &haar()).unwrap();
        let e_in: f64 = x.data().iter().map(|v| v * v).sum();
        let e_out: f64 = bands.lf.data().iter().chain(bands.hf.data()).map(|v| v * v).sum();
        assert!((e_in - e_out).abs() / e_in < 1e-12);
    }

    #[test]
    fn idwt_rejects_channel_mismatch() {
        let lf = TensorData::<f64>::zeros(&[1, 2, 2, 2]);
        let hf = TensorData::<f64>::zeros(&[1, 5, 2, 2]);
        let bands = WaveletBands { lf, hf, orig_hw: (4, 4) };
        assert!(idwt2(&bands, &haar()).is_err());
    }

    #[test]
    fn dwt_rejects_empty() {
        let x = TensorData::<f64>::zeros(&[1, 1, 0, 4]);
        assert!(dwt2(&x, &haar()).is_err());
    }
}
