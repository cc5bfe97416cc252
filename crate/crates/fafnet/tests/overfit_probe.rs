//! Scratch probe: single-patch training throughput. (Removed once the
//! acceptance suite pins the toy configuration.)

use std::time::Instant;

use fafnet::data::{degrade_wald, synth_scene, DatasetConfig};
use fafnet::data::pipeline::{bicubic_up, extract_patches, normalize};
use fafnet::loss::{total_loss_on_tape, HfsConfig};
use fafnet::model::{fafnet_forward_on_tape, init_fafnet, Mode, ModelConfig, WaveletMode};
use fafnet::tensor::params::ParamStore;
use fafnet::tensor::tape::Tape;
use fafnet::train::{adam_step, AdamState};

#[test]
#[ignore]
fn probe_overfit_speed() {
    let ds_cfg = DatasetConfig { bit_depth: 8, ..DatasetConfig::default() };
    let (ms, pan) = synth_scene(1, 64, 4, 4, 8).unwrap();
    let (lr_ms, lr_pan, reference) = degrade_wald(&ms, &pan, &ds_cfg).unwrap();
    let patches = extract_patches("p", &lr_ms, &lr_pan, &reference, &ds_cfg).unwrap();
    assert_eq!(patches.len(), 1);
    let p = &patches[0];
    let ms_up1 = normalize::<f32>(&bicubic_up(&p.ms, 4).unwrap());
    let pan_n1 = normalize::<f32>(&p.pan);
    let ref_n1 = normalize::<f32>(&p.reference);
    let batch = 8usize;
    let rep = |t: &fafnet::tensor::data::TensorData<f32>| {
        let mut shape = t.shape().to_vec();
        shape[0] = batch;
        let mut data = Vec::new();
        for _ in 0..batch { data.extend_from_slice(t.data()); }
        fafnet::tensor::data::TensorData::from_vec(&shape, data).unwrap()
    };
    let ms_up = rep(&ms_up1);
    let pan_n = rep(&pan_n1);
    let ref_n = rep(&ref_n1);

    let cfg = ModelConfig {
        bands: 4,
        channels: 12,
        cb_depth: 2,
        wavelet_mode: WaveletMode::Learnable,
        seed: 11,
        max_value: 255.0,
        train_patch: 64,
        hfs: HfsConfig { lambda: 5e-3, proj_dim: 32, hidden_dim: 64 },
    };
    let mut params: ParamStore<f32> = init_fafnet(&cfg).unwrap();
    let mut adam = AdamState::new(&params, 0.9, 0.999, 1e-8);

    let t0 = Instant::now();
    let mut mae = f64::NAN;
    let steps = 20;
    for _ in 0..steps {
        let mut tape: Tape<f32> = Tape::new();
        let ms_v = tape.leaf(ms_up.clone());
        let pan_v = tape.leaf(pan_n.clone());
        let fwd = fafnet_forward_on_tape(
            &mut tape,
            &mut params,
            &cfg,
            Mode::Train { update_stats: true },
            ms_v,
            pan_v,
        )
        .unwrap();
        let r = tape.leaf(ref_n.clone());
        let losses = total_loss_on_tape(
            &mut tape,
            fwd.fused,
            r,
            &[(fwd.hf_pan[0], fwd.hf_ms[0]), (fwd.hf_pan[1], fwd.hf_ms[1])],
            &params,
            &cfg.hfs,
            0.0,
        )
        .unwrap();
        mae = losses.breakdown(&tape, 0.0).mae;
        tape.backward(losses.total, &mut params).unwrap();
        adam_step(&mut params, &mut adam, 5e-3).unwrap();
    }
    let elapsed = t0.elapsed();
    eprintln!(
        "{} steps in {:?} ({:.1} ms/step), final train-mode mae {:.5}",
        steps,
        elapsed,
        elapsed.as_millis() as f64 / steps as f64,
        mae
    );
}
