//! Binary checkpoint container ("FAFCKPT1").
//!
//! Layout, all integers little-endian:
//!   magic "FAFCKPT1" (8 bytes)
//!   u32 bands, u32 channels, u32 cb_depth, u8 wavelet mode (0 learnable,
//!   1 fixed Haar), u64 seed, f32 normalization max_value, u32 train_patch,
//!   u32 hfs hidden dim, u32 hfs projection dim, f64 hfs lambda,
//!   u32 parameter count
//! then for each parameter, in store order:
//!   u32 name length, name (UTF-8), u32 rank, u32 dims[rank], f32 payload.
//!
//! Values are stored as f32 regardless of the compute type, so a write/read
//! cycle of an f32 store is bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FafError, Result};
use crate::loss::HfsConfig;
use crate::model::{ModelConfig, WaveletMode};
use crate::tensor::data::{Real, TensorData};
use crate::tensor::params::ParamStore;

const MAGIC: &[u8; 8] = b"FAFCKPT1";

/// Keep parsed sizes sane; a corrupt header must not trigger huge
/// allocations.
const MAX_DIM: u32 = 1 << 28;
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;
const MAX_PARAMS: u32 = 1 << 20;

fn format_err(path: &Path, detail: impl Into<String>) -> FafError {
    FafError::Format { path: path.display().to_string(), detail: detail.into() }
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamStore<T>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(cfg.bands as u32).to_le_bytes())?;
    w.write_all(&(cfg.channels as u32).to_le_bytes())?;
    w.write_all(&(cfg.cb_depth as u32).to_le_bytes())?;
    w.write_all(&[match cfg.wavelet_mode {
        WaveletMode::Learnable => 0u8,
        WaveletMode::FixedHaar => 1u8,
    }])?;
    w.write_all(&cfg.seed.to_le_bytes())?;
    w.write_all(&cfg.max_value.to_le_bytes())?;
    w.write_all(&(cfg.train_patch as u32).to_le_bytes())?;
    w.write_all(&(cfg.hfs.hidden_dim as u32).to_le_bytes())?;
    w.write_all(&(cfg.hfs.proj_dim as u32).to_le_bytes())?;
    w.write_all(&cfg.hfs.lambda.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for entry in params.iter() {
        let name = entry.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in entry.value.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(path, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let bands = read_u32(&mut r, path, "bands")?;
    let channels = read_u32(&mut r, path, "channels")?;
    let cb_depth = read_u32(&mut r, path, "cb_depth")?;
    let mut mode_byte = [0u8; 1];
    read_exact(&mut r, &mut mode_byte, path, "wavelet mode")?;
    let wavelet_mode = match mode_byte[0] {
        0 => WaveletMode::Learnable,
        1 => WaveletMode::FixedHaar,
        m => return Err(format_err(path, format!("unknown wavelet mode byte {m}"))),
    };
    let mut seed_bytes = [0u8; 8];
    read_exact(&mut r, &mut seed_bytes, path, "seed")?;
    let seed = u64::from_le_bytes(seed_bytes);
    let mut maxv_bytes = [0u8; 4];
    read_exact(&mut r, &mut maxv_bytes, path, "max_value")?;
    let max_value = f32::from_le_bytes(maxv_bytes);
    let train_patch = read_u32(&mut r, path, "train_patch")?;
    let hidden_dim = read_u32(&mut r, path, "hfs hidden dim")?;
    let proj_dim = read_u32(&mut r, path, "hfs projection dim")?;
    let mut lambda_bytes = [0u8; 8];
    read_exact(&mut r, &mut lambda_bytes, path, "hfs lambda")?;
    let lambda = f64::from_le_bytes(lambda_bytes);
    let count = read_u32(&mut r, path, "parameter count")?;
    if count > MAX_PARAMS {
        return Err(format_err(path, format!("parameter count {count} exceeds limit")));
    }

    let cfg = ModelConfig {
        bands: bands as usize,
        channels: channels as usize,
        cb_depth: cb_depth as usize,
        wavelet_mode,
        seed,
        max_value,
        train_patch: train_patch as usize,
        hfs: HfsConfig {
            lambda,
            proj_dim: proj_dim as usize,
            hidden_dim: hidden_dim as usize,
        },
    };
    cfg.validate().map_err(|e| format_err(path, format!("invalid config in header: {e}")))?;

    let mut store = ParamStore::new(seed);
    for i in 0..count {
        let name_len = read_u32(&mut r, path, "name length")?;
        if name_len > MAX_NAME {
            return Err(format_err(path, format!("parameter {i}: name length {name_len} exceeds limit")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name_buf, path, "name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| format_err(path, format!("parameter {i}: name is not UTF-8")))?;
        let rank = read_u32(&mut r, path, "rank")?;
        if rank > MAX_RANK {
            return Err(format_err(path, format!("parameter {name:?}: rank {rank} exceeds limit")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r, path, "dimension")?;
            if d > MAX_DIM {
                return Err(format_err(path, format!("parameter {name:?}: dimension {d} overflows limit")));
            }
            numel = numel.saturating_mul(d as u64);
            shape.push(d as usize);
        }
        if numel > MAX_DIM as u64 {
            return Err(format_err(path, format!("parameter {name:?}: element count {numel} overflows limit")));
        }
        let mut payload = vec![0u8; numel as usize * 4];
        r.read_exact(&mut payload).map_err(|_| {
            format_err(path, format!("truncated payload while reading parameter {name:?}"))
        })?;
        let data: Vec<T> = payload
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let tensor = TensorData::from_vec(&shape, data)
            .map_err(|e| format_err(path, format!("parameter {name:?}: {e}")))?;
        store
            .insert(&name, tensor)
            .map_err(|e| format_err(path, format!("parameter {name:?}: {e}")))?;
    }
    Ok((cfg, store))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| format_err(path, format!("truncated payload while reading {what}")))
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, what)?;
    Ok(u32::from_le_bytes(b))
}
