//! Synthetic dataset: generation, splits, normalization and on-disk layout.

mod split;
mod stats;
mod store;
mod synth;

pub(crate) use synth::fractal_noise;

pub use split::{stratified_split, SplitManifest, STRATA};
pub use stats::{compute_norm_stats, normalize_scene, NormStats, STD_FLOOR};
pub use store::{read_dataset, write_dataset, Dataset, Manifest, DATASET_VERSION};
pub use synth::{
    generate_scene, generate_scenes, scene_id, GenParams, Scene, MSI_BANDS, NIR, RED, SAR_BANDS,
};
