//! The frequency-aware fusion network.
//!
//! Two extraction branches (one for the upsampled multispectral input, one
//! for the panchromatic input) each run two frequency-aware blocks: a DWT
//! layer splits the signal into low- and high-frequency parts, and two
//! parallel convolutional blocks turn them into features. Fusion happens in
//! the wavelet domain: at each level the detail features of both branches
//! are concatenated, mixed by a 1x1 convolution and a convolutional block,
//! and recombined with the multispectral low-frequency path through an
//! IDWT layer. The level-2 reconstruction feeds the level-1 IDWT as its
//! low-frequency input, and a final convolutional block with a tanh head
//! maps the fused features back to image space.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err, Result};
use crate::loss::HfsConfig;
use crate::tensor::data::{FeatureMap, Real, TensorData};
use crate::tensor::params::ParamStore;
use crate::tensor::tape::{Tape, Var};
use crate::wavelet;

pub const LRELU_ALPHA: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether the wavelet filter banks are trained or pinned to Haar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletMode {
    Learnable,
    FixedHaar,
}

/// Forward-pass mode. Train mode normalizes with batch statistics and,
/// when `update_stats` is set, folds them into the running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { update_stats: bool },
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Ms,
    Pan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of multispectral bands (4 or 8 for the supported sensors).
    pub bands: usize,
    /// Feature channels per level.
    pub channels: usize,
    /// Repetitions of (conv3x3 -> BN -> LReLU) per convolutional block.
    pub cb_depth: usize,
    pub wavelet_mode: WaveletMode,
    pub seed: u64,
    /// Largest representable sample value (2^bit_depth - 1), kept with the
    /// model so inference can normalize inputs the same way training did.
    pub max_value: f32,
    /// Side length of the panchromatic training patch; fixes the input
    /// dims of the similarity-loss MLPs.
    pub train_patch: usize,
    pub hfs: HfsConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 || self.channels == 0 || self.cb_depth == 0 {
            return Err(arg_err(
                "model_config",
                format!(
                    "bands ({}), channels ({}) and cb_depth ({}) must all be >= 1",
                    self.bands, self.channels, self.cb_depth
                ),
            ));
        }
        if self.train_patch % 4 != 0 || self.train_patch == 0 {
            return Err(arg_err(
                "model_config",
                format!("train_patch must be a positive multiple of 4, got {}", self.train_patch),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bands: 4,
            channels: 32,
            cb_depth: 2,
            wavelet_mode: WaveletMode::Learnable,
            seed: 0,
            max_value: 2047.0,
            train_patch: 64,
            hfs: HfsConfig::default(),
        }
    }
}

/// Output of one forward pass: the fused image-space tensor plus the four
/// per-level detail features retained for the similarity loss.
#[derive(Clone, Debug)]
pub struct ForwardRecord<T> {
    pub fused: FeatureMap<T>,
    pub hf_pan: [FeatureMap<T>; 2],
    pub hf_ms: [FeatureMap<T>; 2],
}

/// Tape handles from one forward pass, for composing losses.
#[derive(Clone, Copy, Debug)]
pub struct TapeForward {
    pub fused: Var,
    pub hf_pan: [Var; 2],
    pub hf_ms: [Var; 2],
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// Centered uniform scaled by fan-in, with the leaky-ReLU gain.
    fn conv_bound(&self, fan_in: usize) -> f64 {
        let gain = (2.0 / (1.0 + LRELU_ALPHA * LRELU_ALPHA)).sqrt();
        gain * (3.0 / fan_in as f64).sqrt()
    }

    fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> TensorData<T> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> =
            (0..numel).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect();
        TensorData::from_vec(shape, data).expect("shape/data agree")
    }
}

fn insert_conv<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let bound = init.conv_bound(cin * k * k);
    let w = init.uniform(&[cout, cin, k, k], bound);
    store.insert(&format!("{prefix}.w"), w)?;
    store.insert(&format!("{prefix}.b"), TensorData::zeros(&[cout]))?;
    Ok(())
}

fn insert_bn<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), TensorData::filled(&[c], T::one()))?;
    store.insert(&format!("{prefix}.beta"), TensorData::zeros(&[c]))?;
    store.insert(&format!("{prefix}.running_mean"), TensorData::zeros(&[c]))?;
    store.insert(&format!("{prefix}.running_var"), TensorData::filled(&[c], T::one()))?;
    Ok(())
}

/// conv blocks: cb_depth repetitions of (conv3x3 -> BN -> LReLU); the first
/// conv maps cin -> cout, the rest keep cout.
fn insert_cb<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    cin: usize,
    cout: usize,
    depth: usize,
) -> Result<()> {
    for k in 0..depth {
        let layer_in = if k == 0 { cin } else { cout };
        insert_conv(store, init, &format!("{prefix}.{k}.conv"), layer_in, cout, 3)?;
        insert_bn(store, &format!("{prefix}.{k}.bn"), cout)?;
    }
    Ok(())
}

fn insert_bank<T: Real>(store: &mut ParamStore<T>, prefix: &str, synthesis: bool) -> Result<()> {
    let haar = wavelet::haar_bank::<T>();
    let (low, high) = if synthesis {
        (haar.synthesis_low, haar.synthesis_high)
    } else {
        (haar.analysis_low, haar.analysis_high)
    };
    store.insert(&format!("{prefix}.low"), TensorData::from_vec(&[2], low.to_vec())?)?;
    store.insert(&format!("{prefix}.high"), TensorData::from_vec(&[2], high.to_vec())?)?;
    Ok(())
}

fn insert_fab<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    in_ch: usize,
    c: usize,
    depth: usize,
) -> Result<()> {
    insert_bank(store, &format!("{prefix}.dwt"), false)?;
    insert_cb(store, init, &format!("{prefix}.cb_l"), in_ch, c, depth)?;
    insert_cb(store, init, &format!("{prefix}.cb_h"), 3 * in_ch, 3 * c, depth)?;
    Ok(())
}

fn insert_mlp<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    prefix: &str,
    din: usize,
    hidden: usize,
    k: usize,
) -> Result<()> {
    let b1 = init.conv_bound(din);
    store.insert(&format!("{prefix}.fc1.w"), init.uniform(&[hidden, din], b1))?;
    store.insert(&format!("{prefix}.fc1.b"), TensorData::zeros(&[hidden]))?;
    let b2 = init.conv_bound(hidden);
    store.insert(&format!("{prefix}.fc2.w"), init.uniform(&[k, hidden], b2))?;
    store.insert(&format!("{prefix}.fc2.b"), TensorData::zeros(&[k]))?;
    Ok(())
}

/// Create every parameter of the network in a fixed order: the two
/// extraction branches, the two fusion blocks, the synthesis banks, the
/// reconstruction block, and the two similarity-loss MLPs. Deterministic
/// under the config seed.
pub fn init_fafnet<T: Real>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new(cfg.seed);
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
    let (b, c, depth) = (cfg.bands, cfg.channels, cfg.cb_depth);

    insert_fab(&mut store, &mut init, "pan.fab1", 1, c, depth)?;
    insert_fab(&mut store, &mut init, "pan.fab2", c, c, depth)?;
    insert_fab(&mut store, &mut init, "ms.fab1", b, c, depth)?;
    insert_fab(&mut store, &mut init, "ms.fab2", c, c, depth)?;

    // fusion blocks: 1x1 mix of the concatenated detail features, then a
    // conv block; level 2 also has the low-frequency conv block
    insert_conv(&mut store, &mut init, "ffb1.mix", 6 * c, 3 * c, 1)?;
    insert_cb(&mut store, &mut init, "ffb1.cb_h", 3 * c, 3 * c, depth)?;
    insert_conv(&mut store, &mut init, "ffb2.mix", 6 * c, 3 * c, 1)?;
    insert_cb(&mut store, &mut init, "ffb2.cb_h", 3 * c, 3 * c, depth)?;
    insert_cb(&mut store, &mut init, "ffb2.cb_l", c, c, depth)?;

    insert_bank(&mut store, "idwt1", true)?;
    insert_bank(&mut store, "idwt2", true)?;

    // reconstruction: interior layers follow the usual conv/BN/LReLU
    // pattern, the image-facing conv goes straight to tanh
    for k in 0..depth.saturating_sub(1) {
        insert_conv(&mut store, &mut init, &format!("recon.{k}.conv"), c, c, 3)?;
        insert_bn(&mut store, &format!("recon.{k}.bn"), c)?;
    }
    insert_conv(&mut store, &mut init, &format!("recon.{}.conv", depth - 1), c, b, 3)?;

    // similarity-loss MLPs, one per level (flattened dims differ)
    let p = cfg.train_patch;
    let d1 = 3 * c * (p / 2) * (p / 2);
    let d2 = 3 * c * (p / 4) * (p / 4);
    insert_mlp(&mut store, &mut init, "hfs1", d1, cfg.hfs.hidden_dim, cfg.hfs.proj_dim)?;
    insert_mlp(&mut store, &mut init, "hfs2", d2, cfg.hfs.hidden_dim, cfg.hfs.proj_dim)?;

    Ok(store)
}

/// Names of the wavelet filter parameters (the entries a fixed-Haar run
/// leaves untouched).
pub fn wavelet_param_names() -> Vec<String> {
    let mut names = Vec::new();
    for prefix in ["pan.fab1.dwt", "pan.fab2.dwt", "ms.fab1.dwt", "ms.fab2.dwt", "idwt1", "idwt2"] {
        names.push(format!("{prefix}.low"));
        names.push(format!("{prefix}.high"));
    }
    names
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn bank_vars<T: Real>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
) -> Result<(Var, Var)> {
    match cfg.wavelet_mode {
        WaveletMode::Learnable => {
            let low = tape.param(params, &format!("{prefix}.low"))?;
            let high = tape.param(params, &format!("{prefix}.high"))?;
            Ok((low, high))
        }
        WaveletMode::FixedHaar => {
            // constants on the tape: no gradient ever reaches the stored
            // bank entries, so the optimizer never moves them
            let haar = wavelet::haar_bank::<T>();
            let low = tape.leaf(TensorData::from_vec(&[2], haar.analysis_low.to_vec())?);
            let high = tape.leaf(TensorData::from_vec(&[2], haar.analysis_high.to_vec())?);
            Ok((low, high))
        }
    }
}

fn cb_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ParamStore<T>,
    prefix: &str,
    depth: usize,
    mode: Mode,
    mut x: Var,
) -> Result<Var> {
    for k in 0..depth {
        let w = tape.param(params, &format!("{prefix}.{k}.conv.w"))?;
        let b = tape.param(params, &format!("{prefix}.{k}.conv.b"))?;
        let conv = tape.conv2d(x, w, b, 1)?;
        let gamma = tape.param(params, &format!("{prefix}.{k}.bn.gamma"))?;
        let beta = tape.param(params, &format!("{prefix}.{k}.bn.beta"))?;
        let eps = T::of(BN_EPS);
        let normed = match mode {
            Mode::Train { update_stats } => {
                let (y, stats) = tape.batch_norm_train(conv, gamma, beta, eps)?;
                if update_stats {
                    let momentum = T::of(BN_MOMENTUM);
                    let rm = params.get_mut(&format!("{prefix}.{k}.bn.running_mean"))?;
                    let mut mean_buf = rm.data().to_vec();
                    let rv = params.get_mut(&format!("{prefix}.{k}.bn.running_var"))?;
                    let mut var_buf = rv.data().to_vec();
                    stats.update_running(&mut mean_buf, &mut var_buf, momentum);
                    params
                        .get_mut(&format!("{prefix}.{k}.bn.running_mean"))?
                        .data_mut()
                        .copy_from_slice(&mean_buf);
                    params
                        .get_mut(&format!("{prefix}.{k}.bn.running_var"))?
                        .data_mut()
                        .copy_from_slice(&var_buf);
                }
                y
            }
            Mode::Eval => {
                let rm = params.get(&format!("{prefix}.{k}.bn.running_mean"))?.data().to_vec();
                let rv = params.get(&format!("{prefix}.{k}.bn.running_var"))?.data().to_vec();
                tape.batch_norm_eval(conv, gamma, beta, &rm, &rv, eps)?
            }
        };
        x = tape.lrelu(normed, T::of(LRELU_ALPHA));
    }
    Ok(x)
}

fn expected_fab_input<T: Real>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    level: usize,
    branch: Branch,
    x: Var,
) -> Result<usize> {
    let (_, c_in, h, w) = tape.value(x).dims4("fab_forward")?;
    let want = match (level, branch) {
        (1, Branch::Pan) => 1,
        (1, Branch::Ms) => cfg.bands,
        (2, _) => cfg.channels,
        _ => return Err(arg_err("fab_forward", format!("level must be 1 or 2, got {level}"))),
    };
    if c_in != want {
        return Err(shape_err(
            "fab_forward",
            format!("level {level} {branch:?} input must have {want} channels, got {c_in}"),
        ));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("fab_forward", format!("spatial dims must be even, got {h}x{w}")));
    }
    Ok(c_in)
}

/// One frequency-aware block on the tape: DWT split, then the two parallel
/// conv blocks. Returns (low-frequency features, high-frequency features).
pub fn fab_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    level: usize,
    branch: Branch,
    mode: Mode,
    x: Var,
) -> Result<(Var, Var)> {
    let c_in = expected_fab_input(tape, cfg, level, branch, x)?;
    let prefix = match branch {
        Branch::Pan => format!("pan.fab{level}"),
        Branch::Ms => format!("ms.fab{level}"),
    };
    let (low, high) = bank_vars(tape, params, cfg, &format!("{prefix}.dwt"))?;
    let packed = tape.dwt2(x, low, high)?;
    let g_l = tape.slice_channels(packed, 0, c_in)?;
    let g_h = tape.slice_channels(packed, c_in, 4 * c_in)?;
    let f_l = cb_forward(tape, params, &format!("{prefix}.cb_l"), cfg.cb_depth, mode, g_l)?;
    let f_h = cb_forward(tape, params, &format!("{prefix}.cb_h"), cfg.cb_depth, mode, g_h)?;
    Ok((f_l, f_h))
}

/// One fusion block on the tape: concatenate the two detail streams, mix
/// with a 1x1 conv and a conv block, run the low-frequency path (a conv
/// block at level 2, a pass-through of the level-2 reconstruction at level
/// 1), and synthesize with the IDWT layer.
pub fn ffb_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    level: usize,
    mode: Mode,
    hf_p: Var,
    hf_m: Var,
    lf_in: Var,
) -> Result<Var> {
    if level != 1 && level != 2 {
        return Err(arg_err("ffb_forward", format!("level must be 1 or 2, got {level}")));
    }
    let c = cfg.channels;
    let (_, ch_p, _, _) = tape.value(hf_p).dims4("ffb_forward")?;
    let (_, ch_m, _, _) = tape.value(hf_m).dims4("ffb_forward")?;
    let (_, ch_l, _, _) = tape.value(lf_in).dims4("ffb_forward")?;
    if ch_p != 3 * c || ch_m != 3 * c || ch_l != c {
        return Err(shape_err(
            "ffb_forward",
            format!("expected detail channels {}, {} and low-frequency channels {c}; got {ch_p}, {ch_m}, {ch_l}", 3 * c, 3 * c),
        ));
    }
    let cat = tape.concat_channels(hf_p, hf_m)?;
    let mw = tape.param(params, &format!("ffb{level}.mix.w"))?;
    let mb = tape.param(params, &format!("ffb{level}.mix.b"))?;
    let mixed = tape.conv2d(cat, mw, mb, 0)?;
    let f_h = cb_forward(tape, params, &format!("ffb{level}.cb_h"), cfg.cb_depth, mode, mixed)?;
    let f_l = if level == 2 {
        cb_forward(tape, params, "ffb2.cb_l", cfg.cb_depth, mode, lf_in)?
    } else {
        lf_in
    };
    let (low, high) = bank_vars(tape, params, cfg, &format!("idwt{level}"))?;
    tape.idwt2(f_l, f_h, low, high)
}

fn recon_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
    mut x: Var,
) -> Result<Var> {
    let depth = cfg.cb_depth;
    for k in 0..depth.saturating_sub(1) {
        let w = tape.param(params, &format!("recon.{k}.conv.w"))?;
        let b = tape.param(params, &format!("recon.{k}.conv.b"))?;
        let conv = tape.conv2d(x, w, b, 1)?;
        let gamma = tape.param(params, &format!("recon.{k}.bn.gamma"))?;
        let beta = tape.param(params, &format!("recon.{k}.bn.beta"))?;
        let eps = T::of(BN_EPS);
        let normed = match mode {
            Mode::Train { update_stats } => {
                let (y, stats) = tape.batch_norm_train(conv, gamma, beta, eps)?;
                if update_stats {
                    let momentum = T::of(BN_MOMENTUM);
                    let mut mean_buf =
                        params.get(&format!("recon.{k}.bn.running_mean"))?.data().to_vec();
                    let mut var_buf =
                        params.get(&format!("recon.{k}.bn.running_var"))?.data().to_vec();
                    stats.update_running(&mut mean_buf, &mut var_buf, momentum);
                    params
                        .get_mut(&format!("recon.{k}.bn.running_mean"))?
                        .data_mut()
                        .copy_from_slice(&mean_buf);
                    params
                        .get_mut(&format!("recon.{k}.bn.running_var"))?
                        .data_mut()
                        .copy_from_slice(&var_buf);
                }
                y
            }
            Mode::Eval => {
                let rm = params.get(&format!("recon.{k}.bn.running_mean"))?.data().to_vec();
                let rv = params.get(&format!("recon.{k}.bn.running_var"))?.data().to_vec();
                tape.batch_norm_eval(conv, gamma, beta, &rm, &rv, eps)?
            }
        };
        x = tape.lrelu(normed, T::of(LRELU_ALPHA));
    }
    let w = tape.param(params, &format!("recon.{}.conv.w", depth - 1))?;
    let b = tape.param(params, &format!("recon.{}.conv.b", depth - 1))?;
    let conv = tape.conv2d(x, w, b, 1)?;
    Ok(tape.tanh(conv))
}

/// Full forward pass on the tape. `ms_up` is the multispectral input
/// already upsampled to panchromatic size and normalized to [-1, 1];
/// `pan` is the normalized single-band panchromatic input.
pub fn fafnet_forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
    ms_up: Var,
    pan: Var,
) -> Result<TapeForward> {
    let (n_m, c_m, h_m, w_m) = tape.value(ms_up).dims4("fafnet_forward")?;
    let (n_p, c_p, h_p, w_p) = tape.value(pan).dims4("fafnet_forward")?;
    if n_m != n_p || h_m != h_p || w_m != w_p {
        return Err(shape_err(
            "fafnet_forward",
            format!(
                "ms ({n_m},{c_m},{h_m},{w_m}) and pan ({n_p},{c_p},{h_p},{w_p}) must agree on batch and spatial dims"
            ),
        ));
    }
    if c_m != cfg.bands || c_p != 1 {
        return Err(shape_err(
            "fafnet_forward",
            format!("expected {} ms bands and 1 pan band, got {c_m} and {c_p}", cfg.bands),
        ));
    }
    if h_m % 4 != 0 || w_m % 4 != 0 {
        return Err(shape_err(
            "fafnet_forward",
            format!("spatial dims must be divisible by 4 for two wavelet levels, got {h_m}x{w_m}"),
        ));
    }

    let (pan_l1, pan_h1) = fab_forward_on_tape(tape, params, cfg, 1, Branch::Pan, mode, pan)?;
    let (_pan_l2, pan_h2) = fab_forward_on_tape(tape, params, cfg, 2, Branch::Pan, mode, pan_l1)?;
    let (ms_l1, ms_h1) = fab_forward_on_tape(tape, params, cfg, 1, Branch::Ms, mode, ms_up)?;
    let (ms_l2, ms_h2) = fab_forward_on_tape(tape, params, cfg, 2, Branch::Ms, mode, ms_l1)?;

    let f2 = ffb_forward_on_tape(tape, params, cfg, 2, mode, pan_h2, ms_h2, ms_l2)?;
    let f1 = ffb_forward_on_tape(tape, params, cfg, 1, mode, pan_h1, ms_h1, f2)?;
    let fused = recon_forward(tape, params, cfg, mode, f1)?;

    Ok(TapeForward { fused, hf_pan: [pan_h1, pan_h2], hf_ms: [ms_h1, ms_h2] })
}

/// Host-level forward: runs on a private tape and returns concrete tensors.
pub fn fafnet_forward<T: Real>(
    ms_up: &FeatureMap<T>,
    pan: &FeatureMap<T>,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ForwardRecord<T>> {
    let mut tape = Tape::new();
    let ms_var = tape.leaf(ms_up.clone());
    let pan_var = tape.leaf(pan.clone());
    let fwd = fafnet_forward_on_tape(&mut tape, params, cfg, mode, ms_var, pan_var)?;
    Ok(ForwardRecord {
        fused: tape.value(fwd.fused).clone(),
        hf_pan: [tape.value(fwd.hf_pan[0]).clone(), tape.value(fwd.hf_pan[1]).clone()],
        hf_ms: [tape.value(fwd.hf_ms[0]).clone(), tape.value(fwd.hf_ms[1]).clone()],
    })
}

/// Host-level single block, for inspection and tests.
pub fn fab_forward<T: Real>(
    x: &FeatureMap<T>,
    level: usize,
    branch: Branch,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (l, h) = fab_forward_on_tape(&mut tape, params, cfg, level, branch, mode, xv)?;
    Ok((tape.value(l).clone(), tape.value(h).clone()))
}

/// Host-level single fusion block, for inspection and tests.
pub fn ffb_forward<T: Real>(
    hf_p: &FeatureMap<T>,
    hf_m: &FeatureMap<T>,
    lf_in: &FeatureMap<T>,
    level: usize,
    params: &mut ParamStore<T>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<FeatureMap<T>> {
    let mut tape = Tape::new();
    let p = tape.leaf(hf_p.clone());
    let m = tape.leaf(hf_m.clone());
    let l = tape.leaf(lf_in.clone());
    let out = ffb_forward_on_tape(&mut tape, params, cfg, level, mode, p, m, l)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::data::feature_map;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            bands: 4,
            channels: 4,
            cb_depth: 2,
            wavelet_mode: WaveletMode::Learnable,
            seed: 7,
            max_value: 255.0,
            train_patch: 16,
            hfs: HfsConfig { lambda: 5e-3, proj_dim: 4, hidden_dim: 8 },
        }
    }

    fn ramp(n: usize, c: usize, h: usize, w: usize, scale: f64) -> FeatureMap<f64> {
        let numel = n * c * h * w;
        let data: Vec<f64> = (0..numel).map(|i| ((i as f64) * scale).sin() * 0.5).collect();
        feature_map(n, c, h, w, data).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = toy_cfg();
        let a: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let b: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn band_count_changes_only_io_facing_shapes() {
        let mut cfg4 = toy_cfg();
        cfg4.bands = 4;
        let mut cfg8 = toy_cfg();
        cfg8.bands = 8;
        let s4: ParamStore<f64> = init_fafnet(&cfg4).unwrap();
        let s8: ParamStore<f64> = init_fafnet(&cfg8).unwrap();
        assert_eq!(s4.len(), s8.len());
        let mut differing: Vec<String> = Vec::new();
        for (a, b) in s4.iter().zip(s8.iter()) {
            assert_eq!(a.name, b.name);
            if a.value.shape() != b.value.shape() {
                differing.push(a.name.clone());
            }
        }
        // only the ms level-1 block (input-facing) and the final recon conv
        // (output-facing) may differ
        for name in &differing {
            assert!(
                name.starts_with("ms.fab1.cb_l.0.conv")
                    || name.starts_with("ms.fab1.cb_h.0.conv")
                    || name.starts_with("recon.1.conv"),
                "unexpected band-dependent parameter {name}"
            );
        }
        assert!(!differing.is_empty());
    }

    #[test]
    fn fab_shapes_level1_and_level2() {
        let cfg = toy_cfg();
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let pan = ramp(1, 1, 16, 16, 0.37);
        let (l1, h1) = fab_forward(&pan, 1, Branch::Pan, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(l1.shape(), &[1, 4, 8, 8]);
        assert_eq!(h1.shape(), &[1, 12, 8, 8]);
        let (l2, h2) = fab_forward(&l1, 2, Branch::Pan, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(l2.shape(), &[1, 4, 4, 4]);
        assert_eq!(h2.shape(), &[1, 12, 4, 4]);
    }

    #[test]
    fn fab_zero_input_zero_biases_gives_zero() {
        let cfg = toy_cfg();
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        // biases and BN shifts are zero at init, so in eval mode with
        // identity running stats a zero input stays zero
        let zero = feature_map(1, 1, 8, 8, vec![0.0; 64]).unwrap();
        let (l, h) = fab_forward(&zero, 1, Branch::Pan, &mut params, &cfg, Mode::Eval).unwrap();
        assert!(l.data().iter().all(|v| *v == 0.0));
        assert!(h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fab_rejects_wrong_channel_count() {
        let cfg = toy_cfg();
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let bad = ramp(1, 2, 8, 8, 0.1);
        assert!(fab_forward(&bad, 1, Branch::Pan, &mut params, &cfg, Mode::Eval).is_err());
    }

    #[test]
    fn ffb_doubles_resolution() {
        let cfg = toy_cfg();
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let hf_p = ramp(1, 12, 4, 4, 0.21);
        let hf_m = ramp(1, 12, 4, 4, 0.43);
        let lf = ramp(1, 4, 4, 4, 0.11);
        let out = ffb_forward(&hf_p, &hf_m, &lf, 2, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(out.shape(), &[1, 4, 8, 8]);
        let out1 = ffb_forward(&hf_p, &hf_m, &lf, 1, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(out1.shape(), &[1, 4, 8, 8]);
    }

    #[test]
    fn ffb_level1_zero_detail_is_pure_lf_reconstruction() {
        // with all-zero detail features (and zero biases at init) the level-1
        // fusion block reduces to the IDWT of (lf, 0): the blur-only path
        let mut cfg = toy_cfg();
        cfg.wavelet_mode = WaveletMode::FixedHaar;
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let hf_zero = feature_map(1, 12, 4, 4, vec![0.0; 12 * 16]).unwrap();
        let lf = ramp(1, 4, 4, 4, 0.17);
        let got = ffb_forward(&hf_zero, &hf_zero, &lf, 1, &mut params, &cfg, Mode::Eval).unwrap();
        let bands = crate::wavelet::WaveletBands {
            lf: lf.clone(),
            hf: feature_map(1, 12, 4, 4, vec![0.0; 12 * 16]).unwrap(),
            orig_hw: (8, 8),
        };
        let oracle = crate::wavelet::idwt2(&bands, &crate::wavelet::haar_bank()).unwrap();
        for (a, b) in got.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_tanh_range_and_determinism() {
        let cfg = toy_cfg();
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let ms = ramp(1, 4, 16, 16, 0.31);
        let pan = ramp(1, 1, 16, 16, 0.77);
        let rec = fafnet_forward(&ms, &pan, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(rec.fused.shape(), &[1, 4, 16, 16]);
        assert!(rec.fused.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(rec.hf_pan[0].shape(), &[1, 12, 8, 8]);
        assert_eq!(rec.hf_ms[1].shape(), &[1, 12, 4, 4]);
        let rec2 = fafnet_forward(&ms, &pan, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(rec.fused.data(), rec2.fused.data());
    }

    #[test]
    fn forward_eight_band_output() {
        let mut cfg = toy_cfg();
        cfg.bands = 8;
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let ms = ramp(1, 8, 8, 8, 0.23);
        let pan = ramp(1, 1, 8, 8, 0.51);
        let rec = fafnet_forward(&ms, &pan, &mut params, &cfg, Mode::Eval).unwrap();
        assert_eq!(rec.fused.shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn forward_rejects_indivisible_dims() {
        let cfg = toy_cfg();
        let mut params: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let ms = ramp(1, 4, 6, 6, 0.3);
        let pan = ramp(1, 1, 6, 6, 0.3);
        assert!(fafnet_forward(&ms, &pan, &mut params, &cfg, Mode::Eval).is_err());
    }

    #[test]
    fn fixed_haar_differs_only_in_wavelet_params() {
        let cfg = toy_cfg();
        let mut fixed_cfg = cfg.clone();
        fixed_cfg.wavelet_mode = WaveletMode::FixedHaar;
        let a: ParamStore<f64> = init_fafnet(&cfg).unwrap();
        let b: ParamStore<f64> = init_fafnet(&fixed_cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value, "inventory must match; {} differs", x.name);
        }
    }

    #[test]
    fn parameter_count_matches_shape_walk() {
        // independent shape walk for (B=4, C=32, depth=2, patch 64,
        // hidden 512, K 128)
        let cfg = ModelConfig {
            bands: 4,
            channels: 32,
            cb_depth: 2,
            wavelet_mode: WaveletMode::Learnable,
            seed: 0,
            max_value: 2047.0,
            train_patch: 64,
            hfs: HfsConfig::default(),
        };
        let store: ParamStore<f32> = init_fafnet(&cfg).unwrap();

        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let bn = |c: usize| 4 * c; // gamma, beta, running mean, running var
        let cb = |cin: usize, cout: usize| conv(cin, cout, 3) + bn(cout) + conv(cout, cout, 3) + bn(cout);
        let bank = 4; // low + high, 2 taps each
        let (b, c) = (4usize, 32usize);
        let fab = |cin: usize| bank + cb(cin, c) + cb(3 * cin, 3 * c);
        let ffb_common = |_level: usize| conv(6 * c, 3 * c, 1) + cb(3 * c, 3 * c);
        let mlp = |din: usize| 512 * din + 512 + 128 * 512 + 128;
        let d1 = 3 * c * 32 * 32;
        let d2 = 3 * c * 16 * 16;
        let expected = fab(1)
            + fab(c)
            + fab(b)
            + fab(c)
            + ffb_common(1)
            + ffb_common(2)
            + cb(c, c)
            + 2 * bank
            + conv(c, c, 3)
            + bn(c)
            + conv(c, b, 3)
            + mlp(d1)
            + mlp(d2);
        assert_eq!(store.total_elements(), expected);
    }
}
