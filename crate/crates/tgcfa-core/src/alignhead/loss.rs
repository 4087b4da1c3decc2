//! Projection to the text dimension and the hinge-cosine alignment losses.
//!
//! Per cell j with present labels C+ and absent labels C-:
//!
//! ```text
//! pos_j = (1/|C+|) * sum_{m in C+} max(0, 1 - cos(f_j, t_m))
//! neg_j = (1/|C-|) * sum_{q in C-} max(0, cos(f_j, t_q) - margin)
//! ```
//!
//! and the alignment loss is the sum (or mean, the default) of the cell
//! terms, with `l_align = l_pos + l_neg`. The text embeddings are frozen:
//! gradients are produced for the projected features and the projection
//! parameters only.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

use super::{FeatureGrid, FeatureLevelMask, ProjectedFeatureGrid, ProjectionParams};

/// Norm threshold below which a vector is considered degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Behaviour knobs for the alignment losses.
#[derive(Debug, Clone)]
pub struct AlignConfig {
    /// Margin of the repulsion hinge. 0.0 pushes absent-label cosines
    /// below orthogonality; 1.0 reproduces the literal as-written formula,
    /// which is identically zero for valid cosines.
    pub neg_margin: f64,
    /// Divide the cell sums by p so the loss is independent of grid size.
    pub mean_over_cells: bool,
    /// Error on degenerate (near-zero-norm) vectors instead of skipping
    /// the affected terms.
    pub strict_degenerate: bool,
    /// Record the per-cell contributions for diagnostics.
    pub record_per_cell: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            neg_margin: 0.0,
            mean_over_cells: true,
            strict_degenerate: true,
            record_per_cell: false,
        }
    }
}

impl AlignConfig {
    fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.neg_margin) {
            return Err(Error::Validation(format!(
                "neg_margin must be in [-1, 1], got {}",
                self.neg_margin
            )));
        }
        Ok(())
    }
}

/// Loss values plus diagnostics.
#[derive(Debug, Clone)]
pub struct AlignmentLoss {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_align: f64,
    pub per_cell: Option<Vec<f64>>,
    /// Cells whose projected feature was degenerate and skipped.
    pub skipped_cells: usize,
    /// Individual label terms skipped for a degenerate embedding row.
    pub skipped_terms: usize,
    /// Cells with an empty positive set (possible when background is
    /// excluded from the label set); they contribute zero attraction.
    pub empty_positive_cells: usize,
}

/// Gradients of the alignment loss through the projection.
#[derive(Debug, Clone)]
pub struct ProjectionGradients {
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
    pub d_features: Array2<f64>,
}

/// Standard cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "cosine dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(Error::Validation(format!(
            "degenerate vector in cosine (norms {na:.3e}, {nb:.3e})"
        )));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Applies the affine projection row-wise: out_j = W f_j + b.
pub fn project_features(
    grid: &FeatureGrid,
    params: &ProjectionParams,
) -> Result<ProjectedFeatureGrid> {
    if params.visual_dim() != grid.feature_dim() {
        return Err(Error::Validation(format!(
            "projection expects feature dim {}, grid has {}",
            params.visual_dim(),
            grid.feature_dim()
        )));
    }
    let mut out = grid.features().dot(&params.weight.t());
    for mut row in out.rows_mut() {
        row += &params.bias;
    }
    let (h, w) = grid.grid_shape();
    ProjectedFeatureGrid::from_raw(out, h, w)
}

/// Backpropagates a gradient w.r.t. the projected rows through the
/// projection, yielding gradients for the weight, bias, and input features.
pub fn projection_backward(
    grid: &FeatureGrid,
    params: &ProjectionParams,
    d_projected: &Array2<f64>,
) -> Result<ProjectionGradients> {
    if d_projected.dim() != (grid.num_cells(), params.text_dim()) {
        return Err(Error::Validation(format!(
            "projected gradient shape {:?} does not match ({}, {})",
            d_projected.dim(),
            grid.num_cells(),
            params.text_dim()
        )));
    }
    let d_weight = d_projected.t().dot(grid.features());
    let d_bias = d_projected.sum_axis(ndarray::Axis(0));
    let d_features = d_projected.dot(&params.weight);
    Ok(ProjectionGradients {
        d_weight,
        d_bias,
        d_features,
    })
}

struct Accum<'a> {
    cfg: &'a AlignConfig,
    scale: f64,
    l_pos: f64,
    l_neg: f64,
    per_cell: Option<Vec<f64>>,
    skipped_cells: usize,
    skipped_terms: usize,
    empty_positive_cells: usize,
}

fn validate_inputs(
    proj: &ProjectedFeatureGrid,
    text_embeddings: &Array2<f64>,
    mask: &FeatureLevelMask,
) -> Result<()> {
    if proj.dim() != text_embeddings.ncols() {
        return Err(Error::Validation(format!(
            "projected dim {} != text dim {}",
            proj.dim(),
            text_embeddings.ncols()
        )));
    }
    if mask.num_cells() != proj.num_cells() {
        return Err(Error::Validation(format!(
            "mask cells {} != feature cells {}",
            mask.num_cells(),
            proj.num_cells()
        )));
    }
    if mask.num_labels() != text_embeddings.nrows() {
        return Err(Error::Validation(format!(
            "mask labels {} != table labels {}",
            mask.num_labels(),
            text_embeddings.nrows()
        )));
    }
    Ok(())
}

/// Shared forward/backward walk. When `d_proj` is Some, analytic
/// gradients w.r.t. the projected rows are accumulated into it.
fn run(
    proj: &ProjectedFeatureGrid,
    text_embeddings: &Array2<f64>,
    mask: &FeatureLevelMask,
    cfg: &AlignConfig,
    mut d_proj: Option<&mut Array2<f64>>,
) -> Result<AlignmentLoss> {
    cfg.validate()?;
    validate_inputs(proj, text_embeddings, mask)?;

    let p = proj.num_cells();
    let k = proj.dim();
    let scale = if cfg.mean_over_cells { 1.0 / p as f64 } else { 1.0 };

    // Embedding norms are reused across cells.
    let text_norms: Vec<f64> = text_embeddings
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    if cfg.strict_degenerate {
        if let Some((r, n)) = text_norms.iter().enumerate().find(|(_, n)| **n < NORM_EPS) {
            return Err(Error::Validation(format!(
                "degenerate text embedding row {r} (norm {n:.3e})"
            )));
        }
    }

    let mut acc = Accum {
        cfg,
        scale,
        l_pos: 0.0,
        l_neg: 0.0,
        per_cell: cfg.record_per_cell.then(|| vec![0.0; p]),
        skipped_cells: 0,
        skipped_terms: 0,
        empty_positive_cells: 0,
    };

    for j in 0..p {
        let f = proj.features().row(j);
        let nf = f.dot(&f).sqrt();
        if nf < NORM_EPS {
            if cfg.strict_degenerate {
                return Err(Error::Validation(format!(
                    "degenerate projected feature at cell {j} (norm {nf:.3e})"
                )));
            }
            acc.skipped_cells += 1;
            continue;
        }
        let (pos, neg) = mask.positive_negative_sets(j)?;
        let n_pos = pos.len();
        let n_neg = neg.len();
        if n_pos == 0 {
            acc.empty_positive_cells += 1;
        }
        let mut cell_total = 0.0;
        for (labels, is_positive) in [(&pos, true), (&neg, false)] {
            let count = if is_positive { n_pos } else { n_neg };
            if count == 0 {
                continue;
            }
            let coeff = acc.scale / count as f64;
            for &m in labels.iter() {
                let nt = text_norms[m];
                if nt < NORM_EPS {
                    acc.skipped_terms += 1;
                    continue;
                }
                let t = text_embeddings.row(m);
                let cos = (f.dot(&t) / (nf * nt)).clamp(-1.0, 1.0);
                let hinge = if is_positive {
                    1.0 - cos
                } else {
                    cos - acc.cfg.neg_margin
                };
                if hinge <= 0.0 {
                    continue;
                }
                let contribution = coeff * hinge;
                if is_positive {
                    acc.l_pos += contribution;
                } else {
                    acc.l_neg += contribution;
                }
                cell_total += contribution;
                if let Some(grad) = d_proj.as_deref_mut() {
                    // d cos / d f = t/(|f||t|) - cos * f/|f|^2; the positive
                    // hinge contributes -coeff * dcos, the negative +coeff.
                    let sign = if is_positive { -1.0 } else { 1.0 };
                    let inv_ft = 1.0 / (nf * nt);
                    let inv_ff = cos / (nf * nf);
                    for c in 0..k {
                        grad[[j, c]] += sign * coeff * (t[c] * inv_ft - f[c] * inv_ff);
                    }
                }
            }
        }
        if let Some(pc) = acc.per_cell.as_mut() {
            pc[j] = cell_total;
        }
    }

    let l_align = acc.l_pos + acc.l_neg;
    Ok(AlignmentLoss {
        l_pos: acc.l_pos,
        l_neg: acc.l_neg,
        l_align,
        per_cell: acc.per_cell,
        skipped_cells: acc.skipped_cells,
        skipped_terms: acc.skipped_terms,
        empty_positive_cells: acc.empty_positive_cells,
    })
}

/// Attraction term only.
pub fn positive_alignment_loss(
    proj: &ProjectedFeatureGrid,
    text_embeddings: &Array2<f64>,
    mask: &FeatureLevelMask,
    cfg: &AlignConfig,
) -> Result<f64> {
    Ok(run(proj, text_embeddings, mask, cfg, None)?.l_pos)
}

/// Repulsion term only, with the given margin.
pub fn negative_alignment_loss(
    proj: &ProjectedFeatureGrid,
    text_embeddings: &Array2<f64>,
    mask: &FeatureLevelMask,
    margin: f64,
    cfg: &AlignConfig,
) -> Result<f64> {
    let cfg = AlignConfig {
        neg_margin: margin,
        ..cfg.clone()
    };
    Ok(run(proj, text_embeddings, mask, &cfg, None)?.l_neg)
}

/// Both terms; `l_align = l_pos + l_neg` by construction.
pub fn alignment_loss(
    proj: &ProjectedFeatureGrid,
    text_embeddings: &Array2<f64>,
    mask: &FeatureLevelMask,
    cfg: &AlignConfig,
) -> Result<AlignmentLoss> {
    run(proj, text_embeddings, mask, cfg, None)
}

/// Loss plus the analytic gradient w.r.t. the projected feature rows.
///
/// The text embeddings are treated as constants (frozen); no gradient is
/// produced for them.
pub fn alignment_loss_with_grad(
    proj: &ProjectedFeatureGrid,
    text_embeddings: &Array2<f64>,
    mask: &FeatureLevelMask,
    cfg: &AlignConfig,
) -> Result<(AlignmentLoss, Array2<f64>)> {
    let mut d_proj = Array2::zeros((proj.num_cells(), proj.dim()));
    let loss = run(proj, text_embeddings, mask, cfg, Some(&mut d_proj))?;
    Ok((loss, d_proj))
}
