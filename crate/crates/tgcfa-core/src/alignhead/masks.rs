//! Pooling ground truth to the encoder grid.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

use super::FeatureLevelMask;

/// Pools an H x W label map onto an (h_f, w_f) grid by label presence.
///
/// Cell (r, c) covers pixel rows [floor(r*H/h_f), floor((r+1)*H/h_f)) and
/// the analogous column range, which partitions the image even when the
/// grid does not divide it. A label is present in a cell iff any pixel of
/// its patch carries that label.
pub fn derive_feature_masks(
    ground_truth: ArrayView2<'_, u8>,
    grid: (usize, usize),
    num_labels: usize,
) -> Result<FeatureLevelMask> {
    let (height, width) = ground_truth.dim();
    let (grid_h, grid_w) = grid;
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Validation("grid dimensions must be positive".into()));
    }
    if grid_h > height || grid_w > width {
        return Err(Error::Validation(format!(
            "grid {grid_h}x{grid_w} larger than image {height}x{width}"
        )));
    }
    if num_labels == 0 {
        return Err(Error::Validation("num_labels must be positive".into()));
    }
    if let Some(&bad) = ground_truth.iter().find(|&&l| l as usize >= num_labels) {
        return Err(Error::Validation(format!(
            "label value {bad} out of range [0, {num_labels})"
        )));
    }

    let mut presence = Array2::from_elem((grid_h * grid_w, num_labels), false);
    for gr in 0..grid_h {
        let y0 = gr * height / grid_h;
        let y1 = (gr + 1) * height / grid_h;
        for gc in 0..grid_w {
            let x0 = gc * width / grid_w;
            let x1 = (gc + 1) * width / grid_w;
            let j = gr * grid_w + gc;
            for y in y0..y1 {
                for x in x0..x1 {
                    presence[[j, ground_truth[[y, x]] as usize]] = true;
                }
            }
        }
    }
    FeatureLevelMask::from_presence(presence, grid_h, grid_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn brute_force(
        ground_truth: &Array2<u8>,
        grid: (usize, usize),
        num_labels: usize,
    ) -> Array2<bool> {
        // Independent route: walk every pixel, find its cell by scanning
        // the patch ranges, and mark the label.
        let (height, width) = ground_truth.dim();
        let (grid_h, grid_w) = grid;
        let mut presence = Array2::from_elem((grid_h * grid_w, num_labels), false);
        for y in 0..height {
            for x in 0..width {
                let mut cell = None;
                for gr in 0..grid_h {
                    for gc in 0..grid_w {
                        let y0 = gr * height / grid_h;
                        let y1 = (gr + 1) * height / grid_h;
                        let x0 = gc * width / grid_w;
                        let x1 = (gc + 1) * width / grid_w;
                        if y >= y0 && y < y1 && x >= x0 && x < x1 {
                            cell = Some(gr * grid_w + gc);
                        }
                    }
                }
                presence[[cell.unwrap(), ground_truth[[y, x]] as usize]] = true;
            }
        }
        presence
    }

    #[test]
    fn quadrant_example() {
        // 4x4 map, top-left 2x2 patch all label 1, rest label 0, grid 2x2.
        let mut gt = Array2::<u8>::zeros((4, 4));
        for y in 0..2 {
            for x in 0..2 {
                gt[[y, x]] = 1;
            }
        }
        let mask = derive_feature_masks(gt.view(), (2, 2), 2).unwrap();
        let (pos, _) = mask.positive_negative_sets(0).unwrap();
        assert_eq!(pos, vec![1]);
        for j in 1..4 {
            let (pos, neg) = mask.positive_negative_sets(j).unwrap();
            assert_eq!(pos, vec![0]);
            assert_eq!(neg, vec![1]);
        }
        assert_eq!(mask.presence(), &brute_force(&gt, (2, 2), 2));
    }

    #[test]
    fn uniform_map_every_cell_sees_only_label_zero() {
        let gt = Array2::<u8>::zeros((7, 5));
        let mask = derive_feature_masks(gt.view(), (3, 2), 3).unwrap();
        for j in 0..mask.num_cells() {
            let (pos, neg) = mask.positive_negative_sets(j).unwrap();
            assert_eq!(pos, vec![0]);
            assert_eq!(neg, vec![1, 2]);
        }
    }

    #[test]
    fn full_resolution_grid_is_identity_pooling() {
        let gt = Array2::from_shape_fn((3, 4), |(y, x)| ((y + x) % 3) as u8);
        let mask = derive_feature_masks(gt.view(), (3, 4), 3).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                let (pos, _) = mask.positive_negative_sets(y * 4 + x).unwrap();
                assert_eq!(pos, vec![gt[[y, x]] as usize]);
            }
        }
    }

    #[test]
    fn matches_brute_force_on_non_divisible_grids() {
        let gt = Array2::from_shape_fn((11, 13), |(y, x)| ((3 * y + 5 * x) % 4) as u8);
        for grid in [(3, 5), (4, 4), (11, 13), (2, 7), (1, 1)] {
            let mask = derive_feature_masks(gt.view(), grid, 4).unwrap();
            assert_eq!(mask.presence(), &brute_force(&gt, grid, 4), "grid {grid:?}");
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        let gt = Array2::<u8>::zeros((4, 4));
        assert!(derive_feature_masks(gt.view(), (5, 2), 2).is_err());
        assert!(derive_feature_masks(gt.view(), (0, 2), 2).is_err());
        let mut bad = gt.clone();
        bad[[0, 0]] = 7;
        assert!(derive_feature_masks(bad.view(), (2, 2), 2).is_err());
    }
}
