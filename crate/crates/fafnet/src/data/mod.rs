//! Data handling: the raster container, reduced-resolution simulation,
//! patch extraction, dataset manifests and synthetic scenes.

pub mod image;
pub mod manifest;
pub mod pipeline;
pub mod synth;

pub use image::{read_image, write_image, Image};
pub use manifest::{DatasetManifest, PairEntry, Split};
pub use pipeline::{
    bicubic_up, degrade_plane, degrade_wald, denormalize, extract_patches, gaussian_kernel5, normalize,
    shuffle_patches, DatasetConfig, PatchRecord,
};
pub use synth::{synth_scene, write_synthetic_dataset};
