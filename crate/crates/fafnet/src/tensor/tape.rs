//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward calls append nodes (op id, input refs, saved activations) in
//! topological order; `backward` walks the tape once in reverse and
//! accumulates cotangents, writing parameter gradients back into the
//! `ParamStore` the values were read from. The op set is exactly what the
//! fusion network and its losses need.

use crate::error::{arg_err, degenerate_err, shape_err, FafError, Result};
use crate::tensor::conv;
use crate::tensor::data::{Real, TensorData};
use crate::tensor::params::ParamStore;
use crate::wavelet;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf { param: Option<usize> },
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    LRelu { x: Var, alpha: T },
    Tanh { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    ConcatChannels { a: Var, b: Var },
    SliceChannels { x: Var, start: usize, end: usize },
    Linear { x: Var, w: Var, b: Var },
    Dwt2 { x: Var, low: Var, high: Var },
    Idwt2 { lf: Var, hf: Var, low: Var, high: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: T },
    Sum { x: Var },
    MeanAbsDiff { a: Var, b: Var },
    RowNormalize { x: Var, norms: Vec<T> },
    MatMulNt { a: Var, b: Var },
    ClampUnit { x: Var },
    CorrelationGap { c: Var, lambda: T },
}

struct Node<T> {
    value: TensorData<T>,
    op: Op<T>,
}

/// Batch statistics computed by a train-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide by count) variance used for normalization.
    pub var_biased: Vec<T>,
    /// Elements per channel in the batch.
    pub count: usize,
}

impl<T: Real> BnStats<T> {
    /// Fold into running estimates: exponential moving average with the
    /// given momentum; the running variance stores the unbiased estimate.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let unbias = T::of(self.count as f64) / T::of((self.count - 1) as f64);
        for ci in 0..self.mean.len() {
            running_mean[ci] = (T::one() - momentum) * running_mean[ci] + momentum * self.mean[ci];
            running_var[ci] =
                (T::one() - momentum) * running_var[ci] + momentum * self.var_biased[ci] * unbias;
        }
    }
}

/// Per-node gradients from one backward pass, for inspecting input
/// cotangents (parameter gradients land in the store).
pub struct TapeGrads<T> {
    grads: Vec<Option<TensorData<T>>>,
}

impl<T: Real> TapeGrads<T> {
    pub fn get(&self, v: Var) -> Option<&TensorData<T>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorData<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: TensorData<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (non-parameter) value.
    pub fn leaf(&mut self, value: TensorData<T>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Record a parameter read from the store; `backward` will accumulate
    /// its gradient back into the same entry.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| arg_err("tape", format!("unknown parameter {name:?}")))?;
        Ok(self.push(store.entry(idx).value.clone(), Op::Leaf { param: Some(idx) }))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        let [cout, wc_in, k, k2] = match ws[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(shape_err("conv2d", format!("weight must be rank 4, got {ws:?}"))),
        };
        if k != k2 || !(k == 1 || k == 3) {
            return Err(arg_err("conv2d", format!("kernel must be 1x1 or 3x3, got {k}x{k2}")));
        }
        if (k == 3 && pad != 1) || (k == 1 && pad != 0) {
            return Err(arg_err("conv2d", format!("kernel {k}x{k} requires padding {}, got {pad}", (k - 1) / 2)));
        }
        if wc_in != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels but weight expects {wc_in}"),
            ));
        }
        if bs != [cout] {
            return Err(shape_err("conv2d", format!("bias shape {bs:?} does not match {cout} output channels")));
        }
        let mut out = TensorData::zeros(&[n, cout, h, wd]);
        conv::conv2d_forward(
            self.value(x).data(),
            n,
            cin,
            h,
            wd,
            self.value(w).data(),
            self.value(b).data(),
            cout,
            k,
            pad,
            out.data_mut(),
        );
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }))
    }

    pub fn lrelu(&mut self, x: Var, alpha: T) -> Var {
        let out = self.value(x).map(|v| if v >= T::zero() { v } else { alpha * v });
        self.push(out, Op::LRelu { x, alpha })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh { x })
    }

    /// Batch normalization over (N, H, W) per channel, train mode: the
    /// batch statistics (biased variance) normalize. Returns the batch
    /// stats so the caller can fold them into running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BnStats<T>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        self.check_bn_affine(c, gamma, beta)?;
        let m = n * h * w;
        if m < 2 {
            return Err(degenerate_err(
                "batch_norm",
                format!("train mode needs at least 2 elements per channel, got {m}"),
            ));
        }
        let mf = T::of(m as f64);
        let plane = h * w;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let p = &xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for v in p {
                    acc += *v;
                }
            }
            let mu = acc / mf;
            let mut vacc = T::zero();
            for ni in 0..n {
                let p = &xv[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for v in p {
                    let d = *v - mu;
                    vacc += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = vacc / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_affine(x, gamma, beta, &mean, &inv_std);
        let stats = BnStats { mean: mean.clone(), var_biased: var, count: m };
        let node = self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats: true });
        Ok((node, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (_, c, _, _) = self.value(x).dims4("batch_norm")?;
        self.check_bn_affine(c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err(
                "batch_norm",
                format!("running stats have {} channels, input has {c}", running_mean.len()),
            ));
        }
        let mean = running_mean.to_vec();
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_affine(x, gamma, beta, &mean, &inv_std);
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats: false }))
    }

    fn check_bn_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} must both be [{c}]",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(())
    }

    fn bn_affine(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> TensorData<T> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm").expect("checked");
        let plane = h * w;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = TensorData::zeros(&[n, c, h, w]);
        let ov = out.data_mut();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let scale = g[ci] * inv_std[ci];
                let shift = b[ci] - mean[ci] * scale;
                for i in 0..plane {
                    ov[base + i] = xv[base + i] * scale + shift;
                }
            }
        }
        out
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if na != nb || ha != hb || wa != wb {
            return Err(shape_err(
                "concat_channels",
                format!("batch/spatial dims differ: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let mut out = TensorData::zeros(&[na, ca + cb, ha, wa]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let ov = out.data_mut();
        for ni in 0..na {
            let dst = ni * (ca + cb) * plane;
            ov[dst..dst + ca * plane].copy_from_slice(&av[ni * ca * plane..(ni + 1) * ca * plane]);
            ov[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&bv[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    /// Channels [start, end) of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("slice_channels")?;
        if start > end || end > c {
            return Err(shape_err(
                "slice_channels",
                format!("range {start}..{end} out of bounds for {c} channels"),
            ));
        }
        let plane = h * w;
        let cs = end - start;
        let mut out = TensorData::zeros(&[n, cs, h, w]);
        let xv = self.value(x).data();
        let ov = out.data_mut();
        for ni in 0..n {
            ov[ni * cs * plane..(ni + 1) * cs * plane]
                .copy_from_slice(&xv[(ni * c + start) * plane..(ni * c + end) * plane]);
        }
        Ok(self.push(out, Op::SliceChannels { x, start, end }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.value(x).dims2("linear")?;
        let (dout, wdin) = self.value(w).dims2("linear")?;
        if wdin != din {
            return Err(shape_err("linear", format!("input dim {din} but weight expects {wdin}")));
        }
        if self.value(b).shape() != [dout] {
            return Err(shape_err(
                "linear",
                format!("bias shape {:?} does not match {dout} outputs", self.value(b).shape()),
            ));
        }
        let mut out = TensorData::zeros(&[n, dout]);
        conv::linear_forward(
            self.value(x).data(),
            n,
            din,
            self.value(w).data(),
            self.value(b).data(),
            dout,
            out.data_mut(),
        );
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// DWT analysis into the packed layout (LL block then interleaved
    /// detail stack); split with `slice_channels`. Spatial dims must be even.
    pub fn dwt2(&mut self, x: Var, low: Var, high: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("dwt2")?;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(shape_err("dwt2", format!("spatial dims must be even and nonzero, got {h}x{w}")));
        }
        self.check_filter(low, "dwt2")?;
        self.check_filter(high, "dwt2")?;
        let mut out = TensorData::zeros(&wavelet::dwt2_packed_shape(n, c, h, w));
        wavelet::dwt2_kernel(
            self.value(x).data(),
            n,
            c,
            h,
            w,
            self.value(low).data(),
            self.value(high).data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Dwt2 { x, low, high }))
    }

    pub fn idwt2(&mut self, lf: Var, hf: Var, low: Var, high: Var) -> Result<Var> {
        let (n, c, hh, hw) = self.value(lf).dims4("idwt2")?;
        let (hn, hc, h2, w2) = self.value(hf).dims4("idwt2")?;
        if hn != n || hc != 3 * c || h2 != hh || w2 != hw {
            return Err(shape_err(
                "idwt2",
                format!("hf {:?} incompatible with lf {:?}", self.value(hf).shape(), self.value(lf).shape()),
            ));
        }
        self.check_filter(low, "idwt2")?;
        self.check_filter(high, "idwt2")?;
        let mut out = TensorData::zeros(&[n, c, 2 * hh, 2 * hw]);
        wavelet::idwt2_kernel(
            self.value(lf).data(),
            self.value(hf).data(),
            n,
            c,
            hh,
            hw,
            self.value(low).data(),
            self.value(high).data(),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Idwt2 { lf, hf, low, high }))
    }

    fn check_filter(&self, f: Var, op: &'static str) -> Result<()> {
        if self.value(f).shape() != [2] {
            return Err(shape_err(op, format!("filter must have shape [2], got {:?}", self.value(f).shape())));
        }
        Ok(())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += *v;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(TensorData::scalar(s), Op::Sum { x })
    }

    /// Mean over all elements of |a - b|.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                "mae_loss",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let n = T::of(self.value(a).numel() as f64);
        let mut acc = T::zero();
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += (*x - *y).abs();
        }
        Ok(self.push(TensorData::scalar(acc / n), Op::MeanAbsDiff { a, b }))
    }

    /// Scale each row of a (N, K) matrix to unit L2 norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2("cross_corr")?;
        let xv = self.value(x).data();
        let mut norms = vec![T::zero(); n];
        for (i, norm) in norms.iter_mut().enumerate() {
            let row = &xv[i * k..(i + 1) * k];
            let mut acc = T::zero();
            for v in row {
                acc += *v * *v;
            }
            *norm = acc.sqrt();
            if *norm == T::zero() {
                return Err(degenerate_err("cross_corr", format!("embedding row {i} has zero norm")));
            }
        }
        let mut out = TensorData::zeros(&[n, k]);
        for i in 0..n {
            let inv = T::one() / norms[i];
            for j in 0..k {
                out.data_mut()[i * k + j] = xv[i * k + j] * inv;
            }
        }
        Ok(self.push(out, Op::RowNormalize { x, norms }))
    }

    /// a (N, K) times b^T (K, M) -> (N, M).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ka) = self.value(a).dims2("matmul")?;
        let (m, kb) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(shape_err("matmul", format!("inner dims differ: {ka} vs {kb}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = TensorData::zeros(&[n, m]);
        let ov = out.data_mut();
        for i in 0..n {
            let ar = &av[i * ka..(i + 1) * ka];
            for j in 0..m {
                let br = &bv[j * ka..(j + 1) * ka];
                let mut acc = T::zero();
                for (x, y) in ar.iter().zip(br) {
                    acc += *x * *y;
                }
                ov[i * m + j] = acc;
            }
        }
        Ok(self.push(out, Op::MatMulNt { a, b }))
    }

    /// Clamp to [-1, 1]; gradients pass only through unclamped entries.
    pub fn clamp_unit(&mut self, x: Var) -> Var {
        let one = T::one();
        let out = self.value(x).map(|v| v.min(one).max(-one));
        self.push(out, Op::ClampUnit { x })
    }

    /// Penalty pulling a square correlation matrix toward the identity:
    /// mean squared diagonal gap plus `lambda` times the mean squared
    /// off-diagonal entry.
    pub fn correlation_gap(&mut self, c: Var, lambda: T) -> Result<Var> {
        let (n, m) = self.value(c).dims2("hfs_loss")?;
        if n != m {
            return Err(shape_err("hfs_loss", format!("correlation matrix must be square, got {n}x{m}")));
        }
        if n < 2 {
            return Err(degenerate_err("hfs_loss", format!("off-diagonal mean undefined for batch size {n}")));
        }
        let cv = self.value(c).data();
        let nf = T::of(n as f64);
        let off_count = T::of((n * (n - 1)) as f64);
        let mut diag = T::zero();
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..n {
                let v = cv[i * n + j];
                if i == j {
                    let d = T::one() - v;
                    diag += d * d;
                } else {
                    off += v * v;
                }
            }
        }
        let loss = diag / nf + lambda * off / off_count;
        Ok(self.push(TensorData::scalar(loss), Op::CorrelationGap { c, lambda }))
    }

    /// Backward from a scalar loss with seed 1, writing parameter gradients
    /// into `store` (unreachable parameters get exactly zero).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<TapeGrads<T>> {
        self.backward_seeded(loss, T::one(), store)
    }

    pub fn backward_seeded(&self, loss: Var, seed: T, store: &mut ParamStore<T>) -> Result<TapeGrads<T>> {
        if !self.value(loss).is_scalar() {
            return Err(FafError::NonScalarLoss { numel: self.value(loss).numel() });
        }
        let mut grads: Vec<Option<TensorData<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorData::scalar(seed));
        store.zero_grads();

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            self.accumulate(idx, &dy, &mut grads, store);
            grads[idx] = Some(dy);
        }

        Ok(TapeGrads { grads })
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<TensorData<T>>],
        v: Var,
    ) -> &'g mut TensorData<T> {
        if grads[v.0].is_none() {
            grads[v.0] = Some(TensorData::zeros(self.value(v).shape()));
        }
        grads[v.0].as_mut().unwrap()
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(
        &self,
        idx: usize,
        dy: &TensorData<T>,
        grads: &mut [Option<TensorData<T>>],
        store: &mut ParamStore<T>,
    ) {
        match &self.nodes[idx].op {
            Op::Leaf { param } => {
                if let Some(pidx) = param {
                    let entry = store.entry_mut(*pidx);
                    for (g, d) in entry.grad.data_mut().iter_mut().zip(dy.data()) {
                        *g += *d;
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let (n, cin, h, wd) = self.value(*x).dims4("conv2d").expect("checked");
                let cout = self.value(*w).shape()[0];
                let k = self.value(*w).shape()[2];
                let wv = self.value(*w).clone();
                let xv = self.value(*x).clone();
                {
                    let dx = self.grad_slot(grads, *x);
                    conv::conv2d_backward_input(dy.data(), n, cin, h, wd, wv.data(), cout, k, *pad, dx.data_mut());
                }
                let mut dw = TensorData::zeros(wv.shape());
                let mut db = TensorData::zeros(&[cout]);
                conv::conv2d_backward_weight(
                    xv.data(),
                    dy.data(),
                    n,
                    cin,
                    h,
                    wd,
                    cout,
                    k,
                    *pad,
                    dw.data_mut(),
                    db.data_mut(),
                );
                add_into(self.grad_slot(grads, *w), &dw);
                add_into(self.grad_slot(grads, *b), &db);
            }
            Op::LRelu { x, alpha } => {
                let xd = self.value(*x).clone();
                let dx = self.grad_slot(grads, *x);
                for ((g, d), v) in dx.data_mut().iter_mut().zip(dy.data()).zip(xd.data()) {
                    *g += if *v >= T::zero() { *d } else { *alpha * *d };
                }
            }
            Op::Tanh { x } => {
                let yd = self.nodes[idx].value.clone();
                let dx = self.grad_slot(grads, *x);
                for ((g, d), y) in dx.data_mut().iter_mut().zip(dy.data()).zip(yd.data()) {
                    *g += *d * (T::one() - *y * *y);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let (n, c, h, w) = self.value(*x).dims4("batch_norm").expect("checked");
                let plane = h * w;
                let m = T::of((n * plane) as f64);
                let xv = self.value(*x).clone();
                let gv = self.value(*gamma).clone();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for i in 0..plane {
                            let d = dy.data()[base + i];
                            let xhat = (xv.data()[base + i] - mean[ci]) * inv_std[ci];
                            sum_dy[ci] += d;
                            sum_dy_xhat[ci] += d * xhat;
                        }
                    }
                }
                for ci in 0..c {
                    dgamma[ci] = sum_dy_xhat[ci];
                    dbeta[ci] = sum_dy[ci];
                }
                {
                    let dx = self.grad_slot(grads, *x);
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * plane;
                            let scale = gv.data()[ci] * inv_std[ci];
                            for i in 0..plane {
                                let d = dy.data()[base + i];
                                let contrib = if *batch_stats {
                                    let xhat = (xv.data()[base + i] - mean[ci]) * inv_std[ci];
                                    scale * (d - sum_dy[ci] / m - xhat * sum_dy_xhat[ci] / m)
                                } else {
                                    scale * d
                                };
                                dx.data_mut()[base + i] += contrib;
                            }
                        }
                    }
                }
                let dg = self.grad_slot(grads, *gamma);
                for (g, v) in dg.data_mut().iter_mut().zip(&dgamma) {
                    *g += *v;
                }
                let db = self.grad_slot(grads, *beta);
                for (g, v) in db.data_mut().iter_mut().zip(&dbeta) {
                    *g += *v;
                }
            }
            Op::ConcatChannels { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4("concat_channels").expect("checked");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                {
                    let da = self.grad_slot(grads, *a);
                    for ni in 0..n {
                        let src = ni * (ca + cb) * plane;
                        for (g, d) in da.data_mut()[ni * ca * plane..(ni + 1) * ca * plane]
                            .iter_mut()
                            .zip(&dy.data()[src..src + ca * plane])
                        {
                            *g += *d;
                        }
                    }
                }
                let db = self.grad_slot(grads, *b);
                for ni in 0..n {
                    let src = ni * (ca + cb) * plane + ca * plane;
                    for (g, d) in db.data_mut()[ni * cb * plane..(ni + 1) * cb * plane]
                        .iter_mut()
                        .zip(&dy.data()[src..src + cb * plane])
                    {
                        *g += *d;
                    }
                }
            }
            Op::SliceChannels { x, start, end } => {
                let (n, c, h, w) = self.value(*x).dims4("slice_channels").expect("checked");
                let plane = h * w;
                let cs = end - start;
                let dx = self.grad_slot(grads, *x);
                for ni in 0..n {
                    for (g, d) in dx.data_mut()[(ni * c + start) * plane..(ni * c + end) * plane]
                        .iter_mut()
                        .zip(&dy.data()[ni * cs * plane..(ni + 1) * cs * plane])
                    {
                        *g += *d;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2("linear").expect("checked");
                let dout = self.value(*w).shape()[0];
                let xv = self.value(*x).clone();
                let wv = self.value(*w).clone();
                let mut dx = TensorData::zeros(&[n, din]);
                let mut dw = TensorData::zeros(wv.shape());
                let mut db = TensorData::zeros(&[dout]);
                conv::linear_backward(
                    xv.data(),
                    dy.data(),
                    n,
                    din,
                    wv.data(),
                    dout,
                    dx.data_mut(),
                    dw.data_mut(),
                    db.data_mut(),
                );
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *w), &dw);
                add_into(self.grad_slot(grads, *b), &db);
            }
            Op::Dwt2 { x, low, high } => {
                let (n, c, h, w) = self.value(*x).dims4("dwt2").expect("checked");
                let xv = self.value(*x).clone();
                let lv = self.value(*low).clone();
                let hv = self.value(*high).clone();
                let mut dx = TensorData::zeros(xv.shape());
                let mut dl = TensorData::zeros(&[2]);
                let mut dh = TensorData::zeros(&[2]);
                wavelet::dwt2_backward_kernel(
                    xv.data(),
                    dy.data(),
                    n,
                    c,
                    h,
                    w,
                    lv.data(),
                    hv.data(),
                    dx.data_mut(),
                    dl.data_mut(),
                    dh.data_mut(),
                );
                add_into(self.grad_slot(grads, *x), &dx);
                add_into(self.grad_slot(grads, *low), &dl);
                add_into(self.grad_slot(grads, *high), &dh);
            }
            Op::Idwt2 { lf, hf, low, high } => {
                let (n, c, hh, hw) = self.value(*lf).dims4("idwt2").expect("checked");
                let lfv = self.value(*lf).clone();
                let hfv = self.value(*hf).clone();
                let lv = self.value(*low).clone();
                let hv = self.value(*high).clone();
                let mut dlf = TensorData::zeros(lfv.shape());
                let mut dhf = TensorData::zeros(hfv.shape());
                let mut dl = TensorData::zeros(&[2]);
                let mut dh = TensorData::zeros(&[2]);
                wavelet::idwt2_backward_kernel(
                    lfv.data(),
                    hfv.data(),
                    dy.data(),
                    n,
                    c,
                    hh,
                    hw,
                    lv.data(),
                    hv.data(),
                    dlf.data_mut(),
                    dhf.data_mut(),
                    dl.data_mut(),
                    dh.data_mut(),
                );
                add_into(self.grad_slot(grads, *lf), &dlf);
                add_into(self.grad_slot(grads, *hf), &dhf);
                add_into(self.grad_slot(grads, *low), &dl);
                add_into(self.grad_slot(grads, *high), &dh);
            }
            Op::Reshape { x } => {
                let dx = self.grad_slot(grads, *x);
                for (g, d) in dx.data_mut().iter_mut().zip(dy.data()) {
                    *g += *d;
                }
            }
            Op::Add { a, b } => {
                add_into(self.grad_slot(grads, *a), dy);
                add_into(self.grad_slot(grads, *b), dy);
            }
            Op::Scale { x, c } => {
                let dx = self.grad_slot(grads, *x);
                for (g, d) in dx.data_mut().iter_mut().zip(dy.data()) {
                    *g += *c * *d;
                }
            }
            Op::Sum { x } => {
                let s = dy.scalar_value();
                let dx = self.grad_slot(grads, *x);
                for g in dx.data_mut() {
                    *g += s;
                }
            }
            Op::MeanAbsDiff { a, b } => {
                let s = dy.scalar_value() / T::of(self.value(*a).numel() as f64);
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                {
                    let da = self.grad_slot(grads, *a);
                    for ((g, x), y) in da.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                        *g += s * sign(*x - *y);
                    }
                }
                let db = self.grad_slot(grads, *b);
                for ((g, x), y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *g -= s * sign(*x - *y);
                }
            }
            Op::RowNormalize { x, norms } => {
                let (n, k) = self.value(*x).dims2("cross_corr").expect("checked");
                let yv = self.nodes[idx].value.clone();
                let dx = self.grad_slot(grads, *x);
                for i in 0..n {
                    let yr = &yv.data()[i * k..(i + 1) * k];
                    let dr = &dy.data()[i * k..(i + 1) * k];
                    let mut dot = T::zero();
                    for (y, d) in yr.iter().zip(dr) {
                        dot += *y * *d;
                    }
                    let inv = T::one() / norms[i];
                    for j in 0..k {
                        dx.data_mut()[i * k + j] += (dr[j] - yr[j] * dot) * inv;
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let (n, k) = self.value(*a).dims2("matmul").expect("checked");
                let m = self.value(*b).shape()[0];
                let av = self.value(*a).clone();
                let bv = self.value(*b).clone();
                {
                    let da = self.grad_slot(grads, *a);
                    for i in 0..n {
                        for j in 0..m {
                            let g = dy.data()[i * m + j];
                            if g == T::zero() {
                                continue;
                            }
                            let br = &bv.data()[j * k..(j + 1) * k];
                            for (d, v) in da.data_mut()[i * k..(i + 1) * k].iter_mut().zip(br) {
                                *d += g * *v;
                            }
                        }
                    }
                }
                let db = self.grad_slot(grads, *b);
                for j in 0..m {
                    for i in 0..n {
                        let g = dy.data()[i * m + j];
                        if g == T::zero() {
                            continue;
                        }
                        let ar = &av.data()[i * k..(i + 1) * k];
                        for (d, v) in db.data_mut()[j * k..(j + 1) * k].iter_mut().zip(ar) {
                            *d += g * *v;
                        }
                    }
                }
            }
            Op::ClampUnit { x } => {
                let xv = self.value(*x).clone();
                let dx = self.grad_slot(grads, *x);
                for ((g, d), v) in dx.data_mut().iter_mut().zip(dy.data()).zip(xv.data()) {
                    if v.abs() <= T::one() {
                        *g += *d;
                    }
                }
            }
            Op::CorrelationGap { c, lambda } => {
                let (n, _) = self.value(*c).dims2("hfs_loss").expect("checked");
                let s = dy.scalar_value();
                let nf = T::of(n as f64);
                let off_count = T::of((n * (n - 1)) as f64);
                let cv = self.value(*c).clone();
                let dc = self.grad_slot(grads, *c);
                let two = T::of(2.0);
                for i in 0..n {
                    for j in 0..n {
                        let v = cv.data()[i * n + j];
                        let g = if i == j {
                            -two * (T::one() - v) / nf
                        } else {
                            two * *lambda * v / off_count
                        };
                        dc.data_mut()[i * n + j] += s * g;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut TensorData<T>, src: &TensorData<T>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::data::feature_map;

    #[test]
    fn sum_loss_gives_all_ones_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("x", TensorData::from_vec(&[2, 2], vec![3.0, -1.0, 0.5, 7.0]).unwrap()).unwrap();
        let x = tape.param(&store, "x").unwrap();
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("used", TensorData::scalar(2.0)).unwrap();
        store.insert("unused", TensorData::scalar(5.0)).unwrap();
        let x = tape.param(&store, "used").unwrap();
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("used").unwrap().data(), &[1.0]);
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);
    }

    #[test]
    fn lrelu_negative_slope_chain_rule() {
        // loss = mean(lrelu(w * x)) with w*x < 0 everywhere:
        // d loss / dw = 0.2 * sum(x) / count
        let mut tape: Tape<f64> = Tape::new();
        let mut store = ParamStore::new(0);
        store.insert("w", TensorData::from_vec(&[1, 1], vec![-1.0]).unwrap()).unwrap();
        let x_data = [1.0, 2.0, 3.0, 4.0];
        let w = tape.param(&store, "w").unwrap();
        let x = tape.leaf(TensorData::from_vec(&[4, 1], x_data.to_vec()).unwrap());
        let wx = tape.matmul_nt(x, w).unwrap(); // (4,1): each row is x_i * w
        let act = tape.lrelu(wx, 0.2);
        let s = tape.sum(act);
        let loss = tape.scale(s, 0.25);
        tape.backward(loss, &mut store).unwrap();
        let expect: f64 = 0.2 * x_data.iter().sum::<f64>() / 4.0;
        let got = store.grad("w").unwrap().data()[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn lrelu_positive_and_negative_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(TensorData::from_vec(&[2], vec![-1.0, 3.5]).unwrap());
        let y = tape.lrelu(x, 0.2);
        assert_eq!(tape.value(y).data(), &[-0.2, 3.5]);
    }

    #[test]
    fn tanh_zero_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(TensorData::scalar(0.0));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.leaf(feature_map(2, 3, 4, 4, data.clone()).unwrap());
        // depthwise-like delta: out channel c copies in channel c
        let mut w = TensorData::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let wv = tape.leaf(w);
        let b = tape.leaf(TensorData::zeros(&[3]));
        let y = tape.conv2d(x, wv, b, 1).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(TensorData::zeros(&[1, 2, 3, 3]));
        let w = tape.leaf(TensorData::filled(&[2, 2, 3, 3], 0.7));
        let b = tape.leaf(TensorData::from_vec(&[2], vec![1.5, -2.5]).unwrap());
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let yv = tape.value(y).data();
        for i in 0..9 {
            assert_eq!(yv[i], 1.5);
            assert_eq!(yv[9 + i], -2.5);
        }
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(TensorData::zeros(&[1, 2, 4, 4]));
        let w = tape.leaf(TensorData::zeros(&[4, 3, 3, 3]));
        let b = tape.leaf(TensorData::zeros(&[4]));
        let err = tape.conv2d(x, w, b, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "unhelpful message: {msg}");
    }

    #[test]
    fn batch_norm_two_value_channel() {
        // gamma=1, beta=0, channel values {-1, 1}: mean 0, biased var 1,
        // output +-1/sqrt(1+eps)
        let eps = 1e-5;
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(feature_map(2, 1, 1, 1, vec![-1.0, 1.0]).unwrap());
        let g = tape.leaf(TensorData::from_vec(&[1], vec![1.0]).unwrap());
        let b = tape.leaf(TensorData::from_vec(&[1], vec![0.0]).unwrap());
        let (y, _) = tape.batch_norm_train(x, g, b, eps).unwrap();
        let expect = 1.0 / (1.0 + eps).sqrt();
        let yv = tape.value(y).data();
        assert!((yv[0] + expect).abs() < 1e-12);
        assert!((yv[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_gamma_zero_gives_beta() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(feature_map(1, 1, 2, 2, vec![5.0, -3.0, 2.0, 0.5]).unwrap());
        let g = tape.leaf(TensorData::from_vec(&[1], vec![0.0]).unwrap());
        let b = tape.leaf(TensorData::from_vec(&[1], vec![4.25]).unwrap());
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        for v in tape.value(y).data() {
            assert_eq!(*v, 4.25);
        }
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut tape: Tape<f64> = Tape::new();
        let data = vec![0.3, -0.7, 1.1, 0.0];
        let x = tape.leaf(feature_map(1, 1, 2, 2, data.clone()).unwrap());
        let g = tape.leaf(TensorData::from_vec(&[1], vec![1.0]).unwrap());
        let b = tape.leaf(TensorData::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.batch_norm_eval(x, g, b, &[0.0], &[1.0], 0.0).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&data) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_single_element_errors() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(TensorData::zeros(&[1, 1, 1, 1]));
        let g = tape.leaf(TensorData::from_vec(&[1], vec![1.0]).unwrap());
        let b = tape.leaf(TensorData::from_vec(&[1], vec![0.0]).unwrap());
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let mut tape: Tape<f64> = Tape::new();
        let a_data: Vec<f64> = (0..1 * 2 * 2 * 2).map(|i| i as f64).collect();
        let b_data: Vec<f64> = (0..1 * 3 * 2 * 2).map(|i| 100.0 + i as f64).collect();
        let a = tape.leaf(feature_map(1, 2, 2, 2, a_data.clone()).unwrap());
        let b = tape.leaf(feature_map(1, 3, 2, 2, b_data).unwrap());
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(cat).shape(), &[1, 5, 2, 2]);
        let first = tape.slice_channels(cat, 0, 2).unwrap();
        assert_eq!(tape.value(first).data(), a_data.as_slice());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(TensorData::zeros(&[1, 2, 4, 4]));
        let b = tape.leaf(TensorData::zeros(&[1, 2, 3, 4]));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn concat_with_zero_channel_map() {
        let mut tape: Tape<f64> = Tape::new();
        let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let a = tape.leaf(feature_map(1, 2, 2, 2, data.clone()).unwrap());
        let b = tape.leaf(TensorData::zeros(&[1, 0, 2, 2]));
        let cat = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(cat).shape(), &[1, 2, 2, 2]);
        assert_eq!(tape.value(cat).data(), data.as_slice());
    }

    #[test]
    fn linear_identity_and_one_hot() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(TensorData::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let w = tape.leaf(
            TensorData::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let b = tape.leaf(TensorData::zeros(&[2]));
        let y = tape.linear(z, w, b).unwrap();
        // one-hot row picks column 1 of the weight
        assert_eq!(tape.value(y).data(), &[2.0, 5.0]);
    }

    #[test]
    fn clamp_unit_bounds_and_grad_mask() {
        let mut tape: Tape<f64> = Tape::new();
        let mut store: ParamStore<f64> = ParamStore::new(0);
        store.insert("x", TensorData::from_vec(&[1, 3], vec![-2.0, 0.5, 1.5]).unwrap()).unwrap();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.clamp_unit(x);
        assert_eq!(tape.value(y).data(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum(y);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape: Tape<f64> = Tape::new();
        let mut store: ParamStore<f64> = ParamStore::new(0);
        let x = tape.leaf(TensorData::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(FafError::NonScalarLoss { numel: 4 })
        ));
    }
}
