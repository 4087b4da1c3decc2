//! Synthetic cross-domain segmentation benchmark.
//!
//! Scenes (label geometry) are generated independently of rendering
//! style, so the same scene rendered under two styles yields identical
//! label maps and different images. Styles control per-label intensity,
//! texture noise, a low-frequency bias field, and background confounder
//! objects — the knobs that drive single-source overfitting.

mod dataset;
mod render;
mod scene;

use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, default_benchmark, DatasetConfig, Manifest, ManifestRow, Split, MANIFEST_NAME,
};
pub use render::{render, DomainStyle, SampleRecord};
pub use scene::{generate_scene, rasterize, LabelShape, SceneConfig, SceneSpec, ShapeKind, ShapeSpec};

/// Splitmix64-style seed mixing used to derive independent RNG streams.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a string tag into a seed (for per-style render streams).
pub fn mix_seed_str(base: u64, tag: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in tag.as_bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix_seed(base, hash)
}

/// Per-label rendered intensity statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IntensityStat {
    pub mean: f64,
    pub std: f64,
}
