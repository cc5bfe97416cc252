//! Scratch probe for tuning the toy ablation protocol (ignored by default).

use fafnet::data::{write_synthetic_dataset, DatasetConfig, DatasetManifest};
use fafnet::loss::HfsConfig;
use fafnet::model::{ModelConfig, WaveletMode};
use fafnet::train::{train, TrainConfig, Variant};

#[test]
#[ignore]
fn probe_ablation_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let ds_cfg = DatasetConfig {
        bit_depth: 8,
        seed: 40,
        ms_patch: 8,
        stride: 8,
        ..DatasetConfig::default()
    };
    let manifest_path =
        write_synthetic_dataset(dir.path(), 4, 1, 2, 128, 4, &ds_cfg, 40).unwrap();
    let (manifest, base) = DatasetManifest::load(&manifest_path).unwrap();

    let epochs: usize = std::env::var("ABL_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let beta: f64 = std::env::var("ABL_BETA").ok().and_then(|v| v.parse().ok()).unwrap_or(10.0);
    let lr: f64 = std::env::var("ABL_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-3);
    let channels: usize =
        std::env::var("ABL_C").ok().and_then(|v| v.parse().ok()).unwrap_or(8);

    for seed in std::env::var("ABL_SEEDS").unwrap_or("1 2 3".into()).split_whitespace().map(|v| v.parse::<u64>().unwrap()) {
        let mut row = Vec::new();
        for variant in [Variant::Baseline, Variant::NoHfs, Variant::FixedHaar] {
            let model_cfg = ModelConfig {
                bands: 4,
                channels,
                cb_depth: 2,
                wavelet_mode: WaveletMode::Learnable,
                seed,
                max_value: 255.0,
                train_patch: 32,
                hfs: HfsConfig { lambda: 5e-3, proj_dim: 32, hidden_dim: 64 },
            };
            let cfg = TrainConfig {
                lr,
                batch: 8,
                epochs,
                beta,
                seed,
                checkpoint_every: epochs,
                validate_every: 25,
                variant,
                ..TrainConfig::default()
            };
            let out = dir.path().join(format!("run_{seed}_{variant:?}"));
            let outcome = train(&cfg, &model_cfg, &manifest, &base, &out, None).unwrap();
            let log = std::fs::read_to_string(&outcome.log).unwrap();
            let vals: Vec<&str> = log.lines().filter(|l| l.starts_with("val")).collect();
            eprintln!("  {variant:?}: {vals:?}");
            row.push((variant, outcome.final_val_mae.unwrap()));
        }
        eprintln!("seed {seed}: {row:?}");
    }
}
