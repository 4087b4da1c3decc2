//! Feature-level contrastive alignment between visual features and
//! label text embeddings.
//!
//! The encoder's bottleneck grid is projected to the text dimension,
//! ground truth is pooled to per-cell label presence masks, and each cell
//! is pulled toward the embeddings of its present labels and pushed from
//! the absent ones with hinge-cosine terms. All math here runs in f64;
//! gradients are analytic and verified against finite differences.

mod loss;
mod masks;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use loss::{
    alignment_loss, alignment_loss_with_grad, cosine_similarity, negative_alignment_loss,
    positive_alignment_loss, project_features, projection_backward, AlignConfig, AlignmentLoss,
    ProjectionGradients,
};
pub use masks::derive_feature_masks;

/// Spatially indexed visual features: p = h * w rows of dimension z,
/// row j holding grid cell (j / w, j % w).
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    features: Array2<f64>,
    grid_height: usize,
    grid_width: usize,
}

impl FeatureGrid {
    pub fn new(features: Array2<f64>, grid_height: usize, grid_width: usize) -> Result<Self> {
        if features.nrows() != grid_height * grid_width {
            return Err(Error::Validation(format!(
                "feature rows {} != grid {}x{}",
                features.nrows(),
                grid_height,
                grid_width
            )));
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("feature grid entry {v}"),
            });
        }
        Ok(Self {
            features,
            grid_height,
            grid_width,
        })
    }

    /// Flattens a (channels, height, width) activation into grid rows.
    pub fn from_chw(chw: &Array3<f32>) -> Result<Self> {
        let (z, h, w) = chw.dim();
        let mut features = Array2::zeros((h * w, z));
        for c in 0..z {
            for y in 0..h {
                for x in 0..w {
                    features[[y * w + x, c]] = chw[[c, y, x]] as f64;
                }
            }
        }
        Self::new(features, h, w)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn num_cells(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }
}

/// A [`FeatureGrid`] after projection to the text dimension k.
#[derive(Debug, Clone)]
pub struct ProjectedFeatureGrid {
    features: Array2<f64>,
    grid_height: usize,
    grid_width: usize,
}

impl ProjectedFeatureGrid {
    /// Used by tests and oracles that construct projected grids directly.
    pub fn from_raw(features: Array2<f64>, grid_height: usize, grid_width: usize) -> Result<Self> {
        if features.nrows() != grid_height * grid_width {
            return Err(Error::Validation(format!(
                "projected rows {} != grid {}x{}",
                features.nrows(),
                grid_height,
                grid_width
            )));
        }
        Ok(Self {
            features,
            grid_height,
            grid_width,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn num_cells(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }
}

/// Trainable affine map from the visual dimension z to the text dimension k.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub trainable: bool,
}

impl ProjectionParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Validation(format!(
                "weight rows {} != bias length {}",
                weight.nrows(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "projection parameters".into(),
            });
        }
        Ok(Self {
            weight,
            bias,
            trainable: true,
        })
    }

    /// Small uniform init in (-1/sqrt(z), 1/sqrt(z)) with zero bias.
    pub fn init(visual_dim: usize, text_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (visual_dim as f64).sqrt();
        let weight =
            Array2::from_shape_fn((text_dim, visual_dim), |_| rng.random_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(text_dim),
            trainable: true,
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn text_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Per-cell label presence pooled from the ground-truth map: entry (j, r)
/// is true iff label r occurs anywhere in cell j's pixel patch.
#[derive(Debug, Clone)]
pub struct FeatureLevelMask {
    presence: Array2<bool>,
    grid_height: usize,
    grid_width: usize,
}

impl FeatureLevelMask {
    pub(crate) fn from_presence(
        presence: Array2<bool>,
        grid_height: usize,
        grid_width: usize,
    ) -> Result<Self> {
        if presence.nrows() != grid_height * grid_width {
            return Err(Error::Validation(format!(
                "presence rows {} != grid {}x{}",
                presence.nrows(),
                grid_height,
                grid_width
            )));
        }
        Ok(Self {
            presence,
            grid_height,
            grid_width,
        })
    }

    pub fn presence(&self) -> &Array2<bool> {
        &self.presence
    }

    pub fn num_cells(&self) -> usize {
        self.presence.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.presence.ncols()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grid_height, self.grid_width)
    }

    /// Returns (present labels, absent labels) for cell j. The two sets
    /// partition the label range by construction.
    pub fn positive_negative_sets(&self, j: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if j >= self.num_cells() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.num_cells(),
            });
        }
        let row = self.presence.row(j);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (r, &present) in row.iter().enumerate() {
            if present {
                pos.push(r);
            } else {
                neg.push(r);
            }
        }
        Ok((pos, neg))
    }
}
