//! Adam optimization loop, checkpointing, resume, and the evaluation
//! harness.
//!
//! Training is deterministic under a fixed seed: parameter init, batch
//! shuffling and the optimizer are all driven by counter-derived ChaCha
//! streams, and every reduction runs in a fixed order.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::image::{read_image, Image};
use crate::data::manifest::{DatasetManifest, Split};
use crate::data::pipeline::{
    bicubic_up, degrade_plane, denormalize, extract_patches, normalize, PatchRecord,
};
use crate::error::{arg_err, shape_err, FafError, Result};
use crate::loss::{total_loss_on_tape, LossBreakdown};
use crate::metrics::{ergas, q2n, qnr_suite, sam, scc, MetricsReport};
use crate::model::{fafnet_forward_on_tape, init_fafnet, Mode, ModelConfig, WaveletMode};
use crate::tensor::data::{Real, TensorData};
use crate::tensor::params::ParamStore;
use crate::tensor::tape::Tape;

/// Ablation toggles: the baseline trains everything with the full loss,
/// `FixedHaar` pins the wavelet banks, `NoHfs` drops the similarity terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    FixedHaar,
    NoHfs,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Weight of the similarity terms in the total loss.
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Checkpoint cadence in epochs (also writes one at the end).
    pub checkpoint_every: usize,
    /// Validation cadence in epochs.
    pub validate_every: usize,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 32,
            epochs: 2000,
            beta: 10.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 50,
            validate_every: 10,
            variant: Variant::Baseline,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(arg_err("train_config", format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch < 2 {
            return Err(arg_err(
                "train_config",
                format!("batch must be >= 2 (the similarity loss needs pairs), got {}", self.batch),
            ));
        }
        if self.epochs == 0 {
            return Err(arg_err("train_config", "epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment estimates and the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<TensorData<T>>,
    pub v: Vec<TensorData<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, beta1: T, beta2: T, eps: T) -> Self {
        AdamState {
            m: params.iter().map(|e| TensorData::zeros(e.value.shape())).collect(),
            v: params.iter().map(|e| TensorData::zeros(e.value.shape())).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update over every entry in the store. Entries
/// with all-zero gradients (frozen banks, running statistics, untouched
/// parameters) stay numerically unchanged. A non-finite gradient aborts
/// the step naming the parameter.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(shape_err(
            "adam_step",
            format!("state tracks {} entries, store has {}", state.m.len(), params.len()),
        ));
    }
    for i in 0..params.len() {
        let entry = params.entry(i);
        if !entry.grad.all_finite() {
            return Err(FafError::Train {
                detail: format!("non-finite gradient in parameter {:?}", entry.name),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for i in 0..params.len() {
        let entry = params.entry_mut(i);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((p, g), (mi, vi)) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(entry.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = state.beta1 * *mi + (one - state.beta1) * *g;
            *vi = state.beta2 * *vi + (one - state.beta2) * *g * *g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// One normalized training example in network layout.
struct Example {
    ms_up: TensorData<f32>,
    pan: TensorData<f32>,
    reference: TensorData<f32>,
}

fn prepare_example(patch: &PatchRecord, ratio: usize) -> Result<Example> {
    let ms_up = bicubic_up(&patch.ms, ratio)?;
    Ok(Example {
        ms_up: normalize(&ms_up),
        pan: normalize(&patch.pan),
        reference: normalize(&patch.reference),
    })
}

fn load_split_patches(
    manifest: &DatasetManifest,
    base: &Path,
    split: Split,
) -> Result<Vec<PatchRecord>> {
    let mut patches = Vec::new();
    for pair in manifest.pairs_in(split) {
        let lr_ms = read_image(&base.join(&pair.lr_ms))?;
        let lr_pan = read_image(&base.join(&pair.lr_pan))?;
        let reference = read_image(&base.join(&pair.reference))?;
        patches.extend(extract_patches(&pair.name, &lr_ms, &lr_pan, &reference, &manifest.config)?);
    }
    Ok(patches)
}

/// Stack batch-of-one tensors along the batch axis.
fn stack(items: &[&TensorData<f32>]) -> TensorData<f32> {
    let shape = items[0].shape();
    let mut out_shape = shape.to_vec();
    out_shape[0] = items.len();
    let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
    for t in items {
        data.extend_from_slice(t.data());
    }
    TensorData::from_vec(&out_shape, data).expect("uniform shapes")
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: u64,
    pub final_val_mae: Option<f64>,
    pub last_loss: Option<LossBreakdown>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Mean absolute error of the model (eval mode) over a set of examples.
fn eval_mae(
    params: &mut ParamStore<f32>,
    model_cfg: &ModelConfig,
    examples: &[Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(arg_err("evaluate", "empty example set"));
    }
    let mut acc = 0.0f64;
    for ex in examples {
        let mut tape: Tape<f32> = Tape::new();
        let ms = tape.leaf(ex.ms_up.clone());
        let pan = tape.leaf(ex.pan.clone());
        let fwd = fafnet_forward_on_tape(&mut tape, params, model_cfg, Mode::Eval, ms, pan)?;
        let reference = tape.leaf(ex.reference.clone());
        let mae = tape.mean_abs_diff(fwd.fused, reference)?;
        acc += tape.value(mae).scalar_value() as f64;
    }
    Ok(acc / examples.len() as f64)
}

/// Train on the manifest's train split, validating on its val split.
/// Writes `model.ckpt` (plus `model.ckpt.state` for resume) and `train.log`
/// under `out_dir` and returns the outcome.
pub fn train(
    cfg: &TrainConfig,
    base_model_cfg: &ModelConfig,
    manifest: &DatasetManifest,
    base: &Path,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut model_cfg = base_model_cfg.clone();
    let mut beta = cfg.beta;
    match cfg.variant {
        Variant::Baseline => {}
        Variant::FixedHaar => model_cfg.wavelet_mode = WaveletMode::FixedHaar,
        Variant::NoHfs => beta = 0.0,
    }
    model_cfg.validate()?;

    let ratio = manifest.config.ratio;
    let train_patches = load_split_patches(manifest, base, Split::Train)?;
    if train_patches.is_empty() {
        return Err(arg_err("train", "manifest has no train-split patches"));
    }
    let expected_patch = manifest.config.ms_patch * ratio;
    if expected_patch != model_cfg.train_patch {
        return Err(shape_err(
            "train",
            format!(
                "model expects {}px training patches, dataset provides {expected_patch}px",
                model_cfg.train_patch
            ),
        ));
    }
    let train_examples: Vec<Example> =
        train_patches.iter().map(|p| prepare_example(p, ratio)).collect::<Result<_>>()?;
    let val_patches = load_split_patches(manifest, base, Split::Val)?;
    let val_examples: Vec<Example> =
        val_patches.iter().map(|p| prepare_example(p, ratio)).collect::<Result<_>>()?;

    let ckpt_path = out_dir.join("model.ckpt");
    let state_path = out_dir.join("model.ckpt.state");
    let log_path = out_dir.join("train.log");

    let (mut params, mut adam, start_epoch) = match resume_from {
        Some(path) => {
            let (loaded_cfg, params): (ModelConfig, ParamStore<f32>) = load_checkpoint(path)?;
            if loaded_cfg.bands != model_cfg.bands {
                return Err(shape_err(
                    "train",
                    format!(
                        "checkpoint has {} bands, config expects {}",
                        loaded_cfg.bands, model_cfg.bands
                    ),
                ));
            }
            model_cfg = loaded_cfg;
            if cfg.variant == Variant::FixedHaar {
                model_cfg.wavelet_mode = WaveletMode::FixedHaar;
            }
            let state_file = PathBuf::from(format!("{}.state", path.display()));
            let (adam, epoch) = load_train_state(&state_file, &params, cfg)?;
            (params, adam, epoch)
        }
        None => {
            let params: ParamStore<f32> = init_fafnet(&model_cfg)?;
            let adam = AdamState::new(
                &params,
                cfg.adam_beta1 as f32,
                cfg.adam_beta2 as f32,
                cfg.adam_eps as f32,
            );
            (params, adam, 0usize)
        }
    };

    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(&log_path)?);
    writeln!(
        log,
        "# run variant={:?} lr={} batch={} epochs={} beta={} lambda={} seed={} patches={} start_epoch={}",
        cfg.variant,
        cfg.lr,
        cfg.batch,
        cfg.epochs,
        beta,
        model_cfg.hfs.lambda,
        cfg.seed,
        train_examples.len(),
        start_epoch,
    )?;

    let started = Instant::now();
    let mut last_loss: Option<LossBreakdown> = None;
    let mut last_val: Option<f64> = None;
    let lr = cfg.lr as f32;

    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_examples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));

        for chunk in order.chunks(cfg.batch.min(train_examples.len())) {
            let ms_batch = stack(&chunk.iter().map(|i| &train_examples[*i].ms_up).collect::<Vec<_>>());
            let pan_batch = stack(&chunk.iter().map(|i| &train_examples[*i].pan).collect::<Vec<_>>());
            let ref_batch =
                stack(&chunk.iter().map(|i| &train_examples[*i].reference).collect::<Vec<_>>());
            // the off-diagonal similarity term needs at least two samples
            let batch_beta = if chunk.len() >= 2 { beta } else { 0.0 };

            let mut tape: Tape<f32> = Tape::new();
            let ms = tape.leaf(ms_batch);
            let pan = tape.leaf(pan_batch);
            let fwd = fafnet_forward_on_tape(
                &mut tape,
                &mut params,
                &model_cfg,
                Mode::Train { update_stats: true },
                ms,
                pan,
            )?;
            let reference = tape.leaf(ref_batch);
            let losses = total_loss_on_tape(
                &mut tape,
                fwd.fused,
                reference,
                &[(fwd.hf_pan[0], fwd.hf_ms[0]), (fwd.hf_pan[1], fwd.hf_ms[1])],
                &params,
                &model_cfg.hfs,
                batch_beta,
            )?;
            let breakdown = losses.breakdown(&tape, batch_beta);
            if !breakdown.total.is_finite() {
                log.flush()?;
                return Err(FafError::Train {
                    detail: format!(
                        "loss diverged (total={}) at step {}; last checkpoint retained at {}",
                        breakdown.total,
                        adam.step,
                        ckpt_path.display()
                    ),
                });
            }
            tape.backward(losses.total, &mut params)?;
            adam_step(&mut params, &mut adam, lr)?;
            last_loss = Some(breakdown);
            writeln!(
                log,
                "step={} epoch={} mae={:.6} hfs1={:.6} hfs2={:.6} total={:.6} elapsed_ms={}",
                adam.step,
                epoch,
                breakdown.mae,
                breakdown.hfs1,
                breakdown.hfs2,
                breakdown.total,
                started.elapsed().as_millis()
            )?;
        }

        let end_of_epoch = epoch + 1;
        if !val_examples.is_empty()
            && (end_of_epoch % cfg.validate_every == 0 || end_of_epoch == cfg.epochs)
        {
            let val = eval_mae(&mut params, &model_cfg, &val_examples)?;
            last_val = Some(val);
            writeln!(log, "val epoch={} mae={:.6}", epoch, val)?;
        }
        if end_of_epoch % cfg.checkpoint_every == 0 || end_of_epoch == cfg.epochs {
            save_checkpoint(&ckpt_path, &model_cfg, &params)?;
            save_train_state(&state_path, &adam, end_of_epoch)?;
        }
        log.flush()?;
    }

    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        log: log_path,
        steps: adam.step,
        final_val_mae: last_val,
        last_loss,
    })
}

// ---------------------------------------------------------------------------
// Optimizer state sidecar (for resume)
// ---------------------------------------------------------------------------

const STATE_MAGIC: &[u8; 8] = b"FAFTRST1";

fn save_train_state(path: &Path, adam: &AdamState<f32>, next_epoch: usize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATE_MAGIC)?;
    w.write_all(&adam.step.to_le_bytes())?;
    w.write_all(&(next_epoch as u64).to_le_bytes())?;
    w.write_all(&(adam.m.len() as u32).to_le_bytes())?;
    for (m, v) in adam.m.iter().zip(&adam.v) {
        w.write_all(&(m.numel() as u64).to_le_bytes())?;
        for x in m.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in v.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn load_train_state(
    path: &Path,
    params: &ParamStore<f32>,
    cfg: &TrainConfig,
) -> Result<(AdamState<f32>, usize)> {
    let fmt = |detail: String| FafError::Format { path: path.display().to_string(), detail };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated magic".into()))?;
    if &magic != STATE_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| fmt("truncated step".into()))?;
    let step = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf).map_err(|_| fmt("truncated epoch".into()))?;
    let next_epoch = u64::from_le_bytes(u64buf) as usize;
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| fmt("truncated count".into()))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    if count != params.len() {
        return Err(fmt(format!("state tracks {count} entries, checkpoint has {}", params.len())));
    }
    let mut adam = AdamState::new(
        params,
        cfg.adam_beta1 as f32,
        cfg.adam_beta2 as f32,
        cfg.adam_eps as f32,
    );
    adam.step = step;
    for i in 0..count {
        r.read_exact(&mut u64buf).map_err(|_| fmt(format!("truncated entry {i}")))?;
        let numel = u64::from_le_bytes(u64buf) as usize;
        if numel != adam.m[i].numel() {
            return Err(fmt(format!(
                "entry {i} holds {numel} elements, checkpoint parameter has {}",
                adam.m[i].numel()
            )));
        }
        let mut read_block = |dst: &mut [f32]| -> Result<()> {
            let mut buf = vec![0u8; dst.len() * 4];
            r.read_exact(&mut buf).map_err(|_| fmt(format!("truncated moments at entry {i}")))?;
            for (d, c) in dst.iter_mut().zip(buf.chunks_exact(4)) {
                *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
            Ok(())
        };
        read_block(adam.m[i].data_mut())?;
        read_block(adam.v[i].data_mut())?;
    }
    Ok((adam, next_epoch))
}

// ---------------------------------------------------------------------------
// Inference and evaluation
// ---------------------------------------------------------------------------

/// Fuse one (multispectral, panchromatic) pair with a trained model:
/// bicubic-upsample, normalize, forward in eval mode, denormalize, clamp.
pub fn fuse(
    model_cfg: &ModelConfig,
    params: &mut ParamStore<f32>,
    ms: &Image,
    pan: &Image,
) -> Result<Image> {
    if ms.bands() != model_cfg.bands {
        return Err(shape_err(
            "fuse",
            format!("checkpoint expects {} bands, image has {}", model_cfg.bands, ms.bands()),
        ));
    }
    if pan.bands() != 1 {
        return Err(shape_err("fuse", format!("pan must be single-band, got {}", pan.bands())));
    }
    if pan.height() % ms.height() != 0 || pan.width() % ms.width() != 0 {
        return Err(shape_err(
            "fuse",
            format!(
                "pan {}x{} is not an integer multiple of ms {}x{}",
                pan.height(),
                pan.width(),
                ms.height(),
                ms.width()
            ),
        ));
    }
    let ratio = pan.height() / ms.height();
    if pan.width() / ms.width() != ratio {
        return Err(shape_err("fuse", "pan/ms ratio differs between axes"));
    }
    if pan.height() % 4 != 0 || pan.width() % 4 != 0 {
        return Err(shape_err(
            "fuse",
            format!(
                "pan dims {}x{} must be divisible by 4 (two wavelet levels); pad the inputs first",
                pan.height(),
                pan.width()
            ),
        ));
    }
    if (ms.max_value() - model_cfg.max_value).abs() > 0.5 {
        return Err(arg_err(
            "fuse",
            format!(
                "image bit depth implies max value {}, checkpoint was trained for {}",
                ms.max_value(),
                model_cfg.max_value
            ),
        ));
    }
    let ms_up = bicubic_up(ms, ratio)?;
    let ms_norm: TensorData<f32> = normalize(&ms_up);
    let pan_norm: TensorData<f32> = normalize(pan);
    let mut tape: Tape<f32> = Tape::new();
    let ms_var = tape.leaf(ms_norm);
    let pan_var = tape.leaf(pan_norm);
    let fwd = fafnet_forward_on_tape(&mut tape, params, model_cfg, Mode::Eval, ms_var, pan_var)?;
    let fused = tape.value(fwd.fused).clone();
    let mut out = denormalize(&fused, ms.bit_depth)?;
    out.sensor = ms.sensor.clone();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Degraded inputs against the reference: SAM, ERGAS, Q2n, SCC.
    Reduced,
    /// Original inputs, no reference: D_lambda, D_s, QNR.
    Full,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub per_image: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

/// Evaluate with an injectable fusion function (the test seam); `fuse_fn`
/// receives the pair's input images for the requested mode.
pub fn evaluate_with(
    manifest: &DatasetManifest,
    base: &Path,
    mode: EvalMode,
    mut fuse_fn: impl FnMut(&Image, &Image) -> Result<Image>,
) -> Result<EvalOutcome> {
    let mut per_image = Vec::new();
    let ratio = manifest.config.ratio;
    let mut any = false;
    for pair in manifest.pairs_in(Split::Test) {
        any = true;
        let report = match mode {
            EvalMode::Reduced => {
                let lr_ms = read_image(&base.join(&pair.lr_ms))?;
                let lr_pan = read_image(&base.join(&pair.lr_pan))?;
                let reference = read_image(&base.join(&pair.reference))?;
                let fused = fuse_fn(&lr_ms, &lr_pan)?;
                MetricsReport {
                    sam_deg: Some(sam(&reference, &fused)?),
                    ergas: Some(ergas(&reference, &fused, ratio)?),
                    q2n: Some(q2n(&reference, &fused, 32)?),
                    scc: Some(scc(&reference, &fused)?),
                    ..MetricsReport::default()
                }
            }
            EvalMode::Full => {
                let ms = read_image(&base.join(&pair.reference))?;
                let pan = read_image(&base.join(&pair.pan))?;
                let fused = fuse_fn(&ms, &pan)?;
                let lr_pan = degrade_plane(&pan, &manifest.config)?;
                let (d_lambda, d_s, qnr) = qnr_suite(&fused, &ms, &pan, &lr_pan)?;
                MetricsReport {
                    d_lambda: Some(d_lambda),
                    d_s: Some(d_s),
                    qnr: Some(qnr),
                    ..MetricsReport::default()
                }
            }
        };
        per_image.push((pair.name.clone(), report));
    }
    if !any {
        return Err(arg_err("evaluate", "manifest has no test-split pairs"));
    }
    let (mean, std) = aggregate(&per_image);
    Ok(EvalOutcome { per_image, mean, std })
}

/// Evaluate a trained checkpoint over the manifest's test split.
pub fn evaluate(checkpoint: &Path, manifest: &DatasetManifest, base: &Path, mode: EvalMode) -> Result<EvalOutcome> {
    let (model_cfg, mut params): (ModelConfig, ParamStore<f32>) = load_checkpoint(checkpoint)?;
    evaluate_with(manifest, base, mode, move |ms, pan| fuse(&model_cfg, &mut params, ms, pan))
}

/// Mean and population standard deviation per index, skipping images where
/// an index is absent.
pub fn aggregate(per_image: &[(String, MetricsReport)]) -> (MetricsReport, MetricsReport) {
    let fields: [fn(&MetricsReport) -> Option<f64>; 7] = [
        |r| r.sam_deg,
        |r| r.ergas,
        |r| r.q2n,
        |r| r.scc,
        |r| r.d_lambda,
        |r| r.d_s,
        |r| r.qnr,
    ];
    let mut mean = MetricsReport::default();
    let mut std = MetricsReport::default();
    let setters: [fn(&mut MetricsReport, f64); 7] = [
        |r, v| r.sam_deg = Some(v),
        |r, v| r.ergas = Some(v),
        |r, v| r.q2n = Some(v),
        |r, v| r.scc = Some(v),
        |r, v| r.d_lambda = Some(v),
        |r, v| r.d_s = Some(v),
        |r, v| r.qnr = Some(v),
    ];
    for (get, set) in fields.iter().zip(&setters) {
        let values: Vec<f64> = per_image.iter().filter_map(|(_, r)| get(r)).collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        set(&mut mean, mu);
        set(&mut std, var.sqrt());
    }
    (mean, std)
}
