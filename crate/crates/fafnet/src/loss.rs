//! Training losses: mean absolute error on the reconstruction plus a
//! high-frequency feature similarity (HFS) penalty.
//!
//! The HFS penalty projects the detail features of the two branches through
//! a small MLP, forms the instance-wise cosine cross-correlation matrix of
//! the embeddings, and drives it toward the identity: matching samples
//! should correlate, different samples should not.

use crate::error::{degenerate_err, shape_err, Result};
use crate::tensor::data::{FeatureMap, Real, TensorData};
use crate::tensor::params::ParamStore;
use crate::tensor::tape::{Tape, Var};

pub const LRELU_ALPHA: f64 = 0.2;

/// Configuration of the similarity penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct HfsConfig {
    /// Weight of the off-diagonal suppression term.
    pub lambda: f64,
    /// Embedding dimension produced by the projection MLP.
    pub proj_dim: usize,
    /// Hidden width of the projection MLP.
    pub hidden_dim: usize,
}

impl Default for HfsConfig {
    fn default() -> Self {
        HfsConfig { lambda: 5e-3, proj_dim: 128, hidden_dim: 512 }
    }
}

/// Instance-wise cosine cross-correlation matrix; every entry is in [-1, 1].
#[derive(Clone, Debug)]
pub struct CorrelationMatrix<T> {
    data: TensorData<T>,
}

impl<T: Real> CorrelationMatrix<T> {
    pub fn n(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data.data()[i * self.n() + j]
    }

    pub fn as_tensor(&self) -> &TensorData<T> {
        &self.data
    }

    /// Wrap a square matrix, clamping entries into [-1, 1].
    pub fn from_tensor(data: TensorData<T>) -> Result<Self> {
        let (n, m) = data.dims2("cross_corr")?;
        if n != m {
            return Err(shape_err("cross_corr", format!("matrix must be square, got {n}x{m}")));
        }
        let one = T::one();
        Ok(CorrelationMatrix { data: data.map(|v| v.min(one).max(-one)) })
    }
}

/// Per-term loss values for one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub mae: f64,
    pub hfs1: f64,
    pub hfs2: f64,
    pub beta: f64,
    pub total: f64,
}

/// Loss nodes still on the tape, for backward.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub mae: Var,
    pub hfs1: Option<Var>,
    pub hfs2: Option<Var>,
    pub total: Var,
}

/// Mean over all elements of |reference - fused|.
pub fn mae_loss<T: Real>(fused: &FeatureMap<T>, reference: &FeatureMap<T>) -> Result<T> {
    if fused.shape() != reference.shape() {
        return Err(shape_err(
            "mae_loss",
            format!("{:?} vs {:?}", fused.shape(), reference.shape()),
        ));
    }
    let n = T::of(fused.numel() as f64);
    let mut acc = T::zero();
    for (a, b) in fused.data().iter().zip(reference.data()) {
        acc += (*a - *b).abs();
    }
    Ok(acc / n)
}

/// Flatten each sample of a 4D feature tensor and project it through the
/// two-layer MLP whose parameters live under `prefix` (fc1 -> LReLU -> fc2).
pub fn project_on_tape<T: Real>(
    tape: &mut Tape<T>,
    hf: Var,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<Var> {
    let (n, c, h, w) = tape.value(hf).dims4("project")?;
    let flat = tape.reshape(hf, &[n, c * h * w])?;
    let w1 = tape.param(params, &format!("{prefix}.fc1.w"))?;
    let b1 = tape.param(params, &format!("{prefix}.fc1.b"))?;
    let hid = tape.linear(flat, w1, b1)?;
    let act = tape.lrelu(hid, T::of(LRELU_ALPHA));
    let w2 = tape.param(params, &format!("{prefix}.fc2.w"))?;
    let b2 = tape.param(params, &format!("{prefix}.fc2.b"))?;
    tape.linear(act, w2, b2)
}

/// Host-side projection: returns the (N, K) embedding matrix.
pub fn project<T: Real>(
    hf: &FeatureMap<T>,
    params: &ParamStore<T>,
    prefix: &str,
) -> Result<TensorData<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(hf.clone());
    let out = project_on_tape(&mut tape, x, params, prefix)?;
    Ok(tape.value(out).clone())
}

/// Cosine similarity matrix between rows of the two embedding matrices:
/// c[i][j] = <zp_i, zm_j> / (|zp_i| |zm_j|).
pub fn cross_corr<T: Real>(
    z_p: &TensorData<T>,
    z_m: &TensorData<T>,
) -> Result<CorrelationMatrix<T>> {
    if z_p.shape() != z_m.shape() {
        return Err(shape_err("cross_corr", format!("{:?} vs {:?}", z_p.shape(), z_m.shape())));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(z_p.clone());
    let b = tape.leaf(z_m.clone());
    let c = cross_corr_on_tape(&mut tape, a, b)?;
    CorrelationMatrix::from_tensor(tape.value(c).clone())
}

pub fn cross_corr_on_tape<T: Real>(tape: &mut Tape<T>, z_p: Var, z_m: Var) -> Result<Var> {
    let pn = tape.row_normalize(z_p)?;
    let mn = tape.row_normalize(z_m)?;
    let raw = tape.matmul_nt(pn, mn)?;
    Ok(tape.clamp_unit(raw))
}

/// Mean squared diagonal gap plus `lambda` times the mean squared
/// off-diagonal entry; zero exactly when the matrix is the identity.
pub fn hfs_loss<T: Real>(c: &CorrelationMatrix<T>, lambda: T) -> Result<T> {
    let n = c.n();
    if n < 2 {
        return Err(degenerate_err(
            "hfs_loss",
            format!("off-diagonal mean undefined for batch size {n}"),
        ));
    }
    let nf = T::of(n as f64);
    let off_count = T::of((n * (n - 1)) as f64);
    let mut diag = T::zero();
    let mut off = T::zero();
    for i in 0..n {
        for j in 0..n {
            let v = c.get(i, j);
            if i == j {
                let d = T::one() - v;
                diag += d * d;
            } else {
                off += v * v;
            }
        }
    }
    Ok(diag / nf + lambda * off / off_count)
}

/// Full HFS term for one level, on the tape: project both branches,
/// correlate, penalize.
pub fn hfs_term_on_tape<T: Real>(
    tape: &mut Tape<T>,
    hf_p: Var,
    hf_m: Var,
    params: &ParamStore<T>,
    mlp_prefix: &str,
    lambda: T,
) -> Result<Var> {
    let z_p = project_on_tape(tape, hf_p, params, mlp_prefix)?;
    let z_m = project_on_tape(tape, hf_m, params, mlp_prefix)?;
    let c = cross_corr_on_tape(tape, z_p, z_m)?;
    tape.correlation_gap(c, lambda)
}

/// total = mae + beta * (hfs1 + hfs2). When `beta` is zero the HFS terms
/// are skipped entirely (and reported as zero).
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    fused: Var,
    reference: Var,
    hf_pairs: &[(Var, Var); 2],
    params: &ParamStore<T>,
    cfg: &HfsConfig,
    beta: f64,
) -> Result<LossVars> {
    let mae = tape.mean_abs_diff(fused, reference)?;
    if beta == 0.0 {
        return Ok(LossVars { mae, hfs1: None, hfs2: None, total: mae });
    }
    let lambda = T::of(cfg.lambda);
    let h1 = hfs_term_on_tape(tape, hf_pairs[0].0, hf_pairs[0].1, params, "hfs1", lambda)?;
    let h2 = hfs_term_on_tape(tape, hf_pairs[1].0, hf_pairs[1].1, params, "hfs2", lambda)?;
    let hsum = tape.add(h1, h2)?;
    let weighted = tape.scale(hsum, T::of(beta));
    let total = tape.add(mae, weighted)?;
    Ok(LossVars { mae, hfs1: Some(h1), hfs2: Some(h2), total })
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, beta: f64) -> LossBreakdown {
        LossBreakdown {
            mae: tape.value(self.mae).scalar_value().as_f64(),
            hfs1: self.hfs1.map_or(0.0, |v| tape.value(v).scalar_value().as_f64()),
            hfs2: self.hfs2.map_or(0.0, |v| tape.value(v).scalar_value().as_f64()),
            beta,
            total: tape.value(self.total).scalar_value().as_f64(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::data::feature_map;

    #[test]
    fn mae_zero_when_equal_and_hand_mean() {
        let a = feature_map(1, 1, 1, 2, vec![1.0f64, 2.0]).unwrap();
        assert_eq!(mae_loss(&a, &a).unwrap(), 0.0);
        // |diff| = {0.5, 1.5} -> mean 1.0
        let b = feature_map(1, 1, 1, 2, vec![1.5f64, 0.5]).unwrap();
        assert_eq!(mae_loss(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mae_constant_offset() {
        let a = feature_map(1, 2, 2, 2, vec![0.25f64; 8]).unwrap();
        let c = 0.75;
        let shifted = a.map(|v| v + c);
        assert!((mae_loss(&shifted, &a).unwrap() - c).abs() < 1e-15);
    }

    #[test]
    fn mae_shape_mismatch_errors() {
        let a = feature_map(1, 1, 2, 2, vec![0.0f64; 4]).unwrap();
        let b = feature_map(1, 1, 2, 3, vec![0.0f64; 6]).unwrap();
        assert!(mae_loss(&a, &b).is_err());
    }

    #[test]
    fn cross_corr_identity_rows() {
        let z = TensorData::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let c = cross_corr(&z, &z).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((c.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(c.get(0, 1).abs() < 1e-12);
        assert!(c.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn cross_corr_antipodal_rows() {
        let z = TensorData::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let neg = z.map(|v| -v);
        let c = cross_corr(&z, &neg).unwrap();
        assert!((c.get(0, 0) + 1.0).abs() < 1e-12);
        assert!((c.get(1, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_corr_hand_cosines() {
        let s = 1.0 / 2f64.sqrt();
        let z = TensorData::from_vec(&[2, 2], vec![1.0, 0.0, s, s]).unwrap();
        let c = cross_corr(&z, &z).unwrap();
        assert!((c.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((c.get(1, 1) - 1.0).abs() < 1e-12);
        assert!((c.get(0, 1) - s).abs() < 1e-12);
        assert!((c.get(1, 0) - s).abs() < 1e-12);
    }

    #[test]
    fn cross_corr_zero_row_errors() {
        let z = TensorData::from_vec(&[2, 2], vec![0.0f64, 0.0, 1.0, 0.0]).unwrap();
        let err = cross_corr(&z, &z).unwrap_err().to_string();
        assert!(err.contains("row 0"), "{err}");
    }

    #[test]
    fn hfs_identity_is_zero_and_diag_gap_is_one() {
        let id = CorrelationMatrix::from_tensor(
            TensorData::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(hfs_loss(&id, 5e-3).unwrap(), 0.0);
        let zero = CorrelationMatrix::from_tensor(TensorData::zeros(&[3, 3])).unwrap();
        assert_eq!(hfs_loss(&zero, 5e-3).unwrap(), 1.0);
    }

    #[test]
    fn hfs_hand_example() {
        // N=2, C=[[1,0.5],[0.5,1]], lambda=5e-3 -> 5e-3 * (0.25+0.25)/2
        let c = CorrelationMatrix::from_tensor(
            TensorData::from_vec(&[2, 2], vec![1.0f64, 0.5, 0.5, 1.0]).unwrap(),
        )
        .unwrap();
        let got = hfs_loss(&c, 5e-3).unwrap();
        assert!((got - 1.25e-3).abs() < 1e-15, "{got}");
    }

    #[test]
    fn hfs_rejects_single_sample() {
        let c = CorrelationMatrix::from_tensor(TensorData::from_vec(&[1, 1], vec![1.0f64]).unwrap())
            .unwrap();
        assert!(hfs_loss(&c, 5e-3).is_err());
    }

    #[test]
    fn projection_identity_and_zero_weight_cases() {
        use crate::tensor::params::ParamStore;
        let mut params: ParamStore<f64> = ParamStore::new(0);
        // fc1 = identity(4), fc2 = identity(4): projection is a flatten
        let mut eye = TensorData::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        params.insert("mlp.fc1.w", eye.clone()).unwrap();
        params.insert("mlp.fc1.b", TensorData::zeros(&[4])).unwrap();
        params.insert("mlp.fc2.w", eye).unwrap();
        params.insert("mlp.fc2.b", TensorData::zeros(&[4])).unwrap();
        let hf = feature_map(2, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let z = project(&hf, &params, "mlp").unwrap();
        assert_eq!(z.shape(), &[2, 4]);
        assert_eq!(z.data(), hf.data());

        // zero fc2 weight, bias b: every row equals b
        let mut params2: ParamStore<f64> = ParamStore::new(0);
        let mut eye2 = TensorData::zeros(&[4, 4]);
        for i in 0..4 {
            eye2.data_mut()[i * 4 + i] = 1.0;
        }
        params2.insert("mlp.fc1.w", eye2).unwrap();
        params2.insert("mlp.fc1.b", TensorData::zeros(&[4])).unwrap();
        params2.insert("mlp.fc2.w", TensorData::zeros(&[2, 4])).unwrap();
        params2
            .insert("mlp.fc2.b", TensorData::from_vec(&[2], vec![0.5, -0.25]).unwrap())
            .unwrap();
        let z2 = project(&hf, &params2, "mlp").unwrap();
        assert_eq!(z2.data(), &[0.5, -0.25, 0.5, -0.25]);
    }

    #[test]
    fn projection_hand_matrix_product() {
        use crate::tensor::params::ParamStore;
        let mut params: ParamStore<f64> = ParamStore::new(0);
        let mut eye = TensorData::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        params.insert("mlp.fc1.w", eye).unwrap();
        params.insert("mlp.fc1.b", TensorData::zeros(&[4])).unwrap();
        // 4 -> 2 projection with hand-set rows
        params
            .insert(
                "mlp.fc2.w",
                TensorData::from_vec(&[2, 4], vec![1.0, 0.0, 2.0, 0.0, 0.0, -1.0, 0.0, 3.0]).unwrap(),
            )
            .unwrap();
        params.insert("mlp.fc2.b", TensorData::zeros(&[2])).unwrap();
        let hf = feature_map(2, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let z = project(&hf, &params, "mlp").unwrap();
        // rows: [x0 + 2 x2, -x1 + 3 x3]
        assert_eq!(z.data(), &[7.0, 10.0, 19.0, 18.0]);
    }
}
