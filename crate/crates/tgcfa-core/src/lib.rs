//! Text-guided contrastive feature alignment (TGCFA) for single-source
//! domain generalization in image segmentation.
//!
//! The crate is organised around five subsystems:
//!
//! - [`textbank`]: per-label text descriptions, pluggable frozen text
//!   encoders, and label-wise mean embedding tables.
//! - [`alignhead`]: projection of visual features to the text dimension,
//!   feature-level mask pooling, and the hinge-cosine alignment losses
//!   (with analytic gradients).
//! - [`segcore`]: a small plain U-Net with hand-rolled backprop, the
//!   segmentation objective (cross-entropy + soft Dice), the combined
//!   training loss, Dice metrics, and checkpointing.
//! - [`synthdom`]: a deterministic synthetic cross-domain benchmark
//!   generator with controllable intensity maps and background confounders.
//! - [`harness`]: config-driven training/evaluation with strict
//!   source-only data hygiene, plus the baseline-vs-aligned trend study.

pub mod alignhead;
pub mod error;
pub mod harness;
pub mod segcore;
pub mod synthdom;
pub mod tensorio;
pub mod textbank;

pub use error::{Error, Result};
