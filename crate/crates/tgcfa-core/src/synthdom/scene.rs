//! Scene geometry: deterministic shape placement and rasterization.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    RoundedRect,
    Blob,
}

/// One placed shape. Centers and axes are in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub label: u8,
    pub kind: ShapeKind,
    /// (row, col) center.
    pub center: (f64, f64),
    /// Semi-axes (along the rotated local axes).
    pub axes: (f64, f64),
    /// Rotation in radians.
    pub rotation: f64,
    /// Radial wobble harmonics (frequency, amplitude, phase); used by
    /// `Blob`, empty otherwise.
    pub wobble: Vec<(usize, f64, f64)>,
}

impl ShapeSpec {
    /// Largest radial extent, used for in-canvas checks.
    fn max_extent(&self) -> f64 {
        let base = self.axes.0.max(self.axes.1);
        let wobble: f64 = self.wobble.iter().map(|(_, a, _)| a.abs()).sum();
        base * (1.0 + wobble)
    }

    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (cy, cx) = self.center;
        let (s, c) = self.rotation.sin_cos();
        let dy = row - cy;
        let dx = col - cx;
        // rotate into the shape frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = self.axes;
        match self.kind {
            ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::RoundedRect => {
                let radius = 0.3 * a.min(b);
                let qx = u.abs() - (a - radius);
                let qy = v.abs() - (b - radius);
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0) - radius <= 0.0
            }
            ShapeKind::Blob => {
                let theta = v.atan2(u);
                let denom = (b * theta.cos()).powi(2) + (a * theta.sin()).powi(2);
                if denom <= 0.0 {
                    return false;
                }
                let r_ellipse = a * b / denom.sqrt();
                let factor: f64 = 1.0
                    + self
                        .wobble
                        .iter()
                        .map(|&(k, amp, phase)| amp * (k as f64 * theta + phase).sin())
                        .sum::<f64>();
                (u * u + v * v).sqrt() <= r_ellipse * factor.max(0.1)
            }
        }
    }
}

/// Axis ranges for one foreground label's shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelShape {
    pub kind: ShapeKind,
    pub axis_a: (f64, f64),
    pub axis_b: (f64, f64),
    /// Per-harmonic radial wobble amplitude range (`Blob` only).
    #[serde(default = "default_wobble")]
    pub wobble: (f64, f64),
}

fn default_wobble() -> (f64, f64) {
    (0.04, 0.16)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    /// (height, width) canvas in pixels.
    pub canvas: (usize, usize),
    /// Total label count including background label 0.
    pub num_labels: usize,
    /// One entry per foreground label; entry i configures label i + 1.
    pub shapes: Vec<LabelShape>,
    /// Minimum distance between a shape's extent and the canvas border.
    pub placement_margin: f64,
    /// Minimum center-to-center distance between foreground shapes.
    pub min_center_separation: f64,
    /// Placement retries before giving up.
    pub max_attempts: usize,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.canvas;
        if h == 0 || w == 0 {
            return Err(Error::Validation("canvas must be non-empty".into()));
        }
        if self.num_labels == 0 || self.num_labels > 255 {
            return Err(Error::Validation(format!(
                "num_labels {} out of range",
                self.num_labels
            )));
        }
        if self.shapes.len() + 1 != self.num_labels {
            return Err(Error::Validation(format!(
                "{} shape configs for {} labels (background needs none)",
                self.shapes.len(),
                self.num_labels
            )));
        }
        Ok(())
    }
}

/// Geometry of one scene; a pure function of (config, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas: (usize, usize),
    pub shapes: Vec<ShapeSpec>,
    pub seed: u64,
}

/// Places one shape per foreground label. Later shapes occlude earlier
/// ones during rasterization.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = config.canvas;
    let mut shapes: Vec<ShapeSpec> = Vec::with_capacity(config.shapes.len());
    for (i, shape_cfg) in config.shapes.iter().enumerate() {
        let label = (i + 1) as u8;
        let mut placed = false;
        for _ in 0..config.max_attempts.max(1) {
            let a = rng.random_range(shape_cfg.axis_a.0..=shape_cfg.axis_a.1);
            let b = rng.random_range(shape_cfg.axis_b.0..=shape_cfg.axis_b.1);
            let rotation = rng.random_range(0.0..std::f64::consts::PI);
            let wobble = if shape_cfg.kind == ShapeKind::Blob {
                (2..5)
                    .map(|k| {
                        (
                            k,
                            rng.random_range(shape_cfg.wobble.0..shape_cfg.wobble.1),
                            rng.random_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let candidate = ShapeSpec {
                label,
                kind: shape_cfg.kind,
                center: (0.0, 0.0),
                axes: (a, b),
                rotation,
                wobble,
            };
            let ext = candidate.max_extent() + config.placement_margin;
            if 2.0 * ext >= h as f64 || 2.0 * ext >= w as f64 {
                continue;
            }
            let cy = rng.random_range(ext..(h as f64 - ext));
            let cx = rng.random_range(ext..(w as f64 - ext));
            let candidate = ShapeSpec {
                center: (cy, cx),
                ..candidate
            };
            let separated = shapes.iter().all(|s| {
                let d = ((s.center.0 - cy).powi(2) + (s.center.1 - cx).powi(2)).sqrt();
                d >= config.min_center_separation
            });
            if separated {
                shapes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place shape for label {label} within {} attempts",
                config.max_attempts
            )));
        }
    }
    Ok(SceneSpec {
        canvas: config.canvas,
        shapes,
        seed,
    })
}

/// Renders the label map: background 0, later shapes occlude earlier.
pub fn rasterize(scene: &SceneSpec) -> Array2<u8> {
    let (h, w) = scene.canvas;
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for shape in scene.shapes.iter().rev() {
                if shape.contains(py, px) {
                    labels[[y, x]] = shape.label;
                    break;
                }
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn three_label_config() -> SceneConfig {
        SceneConfig {
            canvas: (48, 48),
            num_labels: 3,
            shapes: vec![
                LabelShape {
                    kind: ShapeKind::Ellipse,
                    axis_a: (7.0, 10.0),
                    axis_b: (5.0, 8.0),
                    wobble: default_wobble(),
                },
                LabelShape {
                    kind: ShapeKind::Blob,
                    axis_a: (6.0, 9.0),
                    axis_b: (5.0, 7.0),
                    wobble: default_wobble(),
                },
            ],
            placement_margin: 1.0,
            min_center_separation: 4.0,
            max_attempts: 200,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = three_label_config();
        let a = generate_scene(&cfg, 99).unwrap();
        let b = generate_scene(&cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_shape_config_yields_background_only() {
        let cfg = SceneConfig {
            canvas: (16, 16),
            num_labels: 1,
            shapes: vec![],
            placement_margin: 1.0,
            min_center_separation: 0.0,
            max_attempts: 10,
        };
        let scene = generate_scene(&cfg, 3).unwrap();
        let labels = rasterize(&scene);
        assert!(labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn labels_stay_in_range_and_shapes_in_canvas() {
        let cfg = three_label_config();
        for seed in 0..20 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let labels = rasterize(&scene);
            assert!(labels.iter().all(|&l| (l as usize) < cfg.num_labels));
            // every foreground label appears (nothing fully occluded off-canvas)
            for shape in &scene.shapes {
                let ext = shape.max_extent();
                assert!(shape.center.0 - ext >= 0.0);
                assert!(shape.center.0 + ext <= cfg.canvas.0 as f64);
                assert!(shape.center.1 - ext >= 0.0);
                assert!(shape.center.1 + ext <= cfg.canvas.1 as f64);
            }
        }
    }

    #[test]
    fn infeasible_config_is_a_generation_error() {
        let cfg = SceneConfig {
            canvas: (8, 8),
            num_labels: 2,
            shapes: vec![LabelShape {
                kind: ShapeKind::Ellipse,
                axis_a: (20.0, 30.0),
                axis_b: (20.0, 30.0),
                wobble: default_wobble(),
            }],
            placement_margin: 1.0,
            min_center_separation: 0.0,
            max_attempts: 20,
        };
        assert!(matches!(
            generate_scene(&cfg, 0),
            Err(Error::Generation(_))
        ));
    }

    #[test]
    fn occlusion_order_later_wins() {
        let scene = SceneSpec {
            canvas: (16, 16),
            shapes: vec![
                ShapeSpec {
                    label: 1,
                    kind: ShapeKind::Ellipse,
                    center: (8.0, 8.0),
                    axes: (5.0, 5.0),
                    rotation: 0.0,
                    wobble: vec![],
                },
                ShapeSpec {
                    label: 2,
                    kind: ShapeKind::Ellipse,
                    center: (8.0, 8.0),
                    axes: (2.0, 2.0),
                    rotation: 0.0,
                    wobble: vec![],
                },
            ],
            seed: 0,
        };
        let labels = rasterize(&scene);
        assert_eq!(labels[[8, 8]], 2);
        assert_eq!(labels[[8, 12]], 1);
    }
}
