//! On-disk dataset construction and the split manifest.
//!
//! Train/val are rendered only under the source style; test scenes use
//! held-out seeds disjoint from train/val and are rendered under the
//! source and every target style (same geometry, different appearance).

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{write_tensor, TensorData};

use super::render::{render, DomainStyle};
use super::scene::{generate_scene, LabelShape, SceneConfig, ShapeKind};
use super::{mix_seed, mix_seed_str, IntensityStat};

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split '{other}'"))),
        }
    }
}

/// One sample's manifest entry; paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub split: Split,
    pub domain: String,
    pub scene_seed: u64,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut text = String::from("split\tdomain\tscene_seed\timage\tlabels\n");
        for row in &self.rows {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                row.split,
                row.domain,
                row.scene_seed,
                row.image.display(),
                row.labels.display()
            ));
        }
        let path = root.join(MANIFEST_NAME);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::schema(
                    &path,
                    format!("line {}: expected 5 tab-separated fields", i + 1),
                ));
            }
            rows.push(ManifestRow {
                split: fields[0].parse()?,
                domain: fields[1].to_string(),
                scene_seed: fields[2]
                    .parse()
                    .map_err(|_| Error::schema(&path, format!("line {}: bad seed", i + 1)))?,
                image: PathBuf::from(fields[3]),
                labels: PathBuf::from(fields[4]),
            });
        }
        Ok(Self { rows })
    }

    pub fn domains(&self, split: Split) -> Vec<String> {
        let set: BTreeSet<String> = self
            .rows
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.domain.clone())
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_per_domain: usize,
    pub scene: SceneConfig,
    pub source: DomainStyle,
    #[serde(default)]
    pub targets: Vec<DomainStyle>,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.source.validate(self.scene.num_labels)?;
        let mut names = BTreeSet::new();
        names.insert(self.source.name.clone());
        for t in &self.targets {
            t.validate(self.scene.num_labels)?;
            if !names.insert(t.name.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate style name '{}'",
                    t.name
                )));
            }
        }
        Ok(())
    }
}

fn write_sample(
    root: &Path,
    rel_dir: &Path,
    split: Split,
    style: &DomainStyle,
    scene: &super::scene::SceneSpec,
) -> Result<ManifestRow> {
    let rec = render(scene, style, mix_seed_str(scene.seed, &style.name))?;
    let dir = root.join(rel_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let image_rel = rel_dir.join(format!("img_{:08}.tgts", scene.seed));
    let labels_rel = rel_dir.join(format!("lab_{:08}.tgts", scene.seed));
    let (h, w) = rec.image.dim();
    let chw = rec
        .image
        .to_shape((1usize, h, w))
        .expect("contiguous")
        .to_owned();
    write_tensor(&root.join(&image_rel), &TensorData::F32(chw.into_dyn()))?;
    write_tensor(
        &root.join(&labels_rel),
        &TensorData::U8(rec.labels.clone().into_dyn()),
    )?;
    Ok(ManifestRow {
        split,
        domain: style.name.clone(),
        scene_seed: scene.seed,
        image: image_rel,
        labels: labels_rel,
    })
}

/// Renders the full dataset under `root` and writes the split manifest.
/// Scene seeds are disjoint across splits by construction and the whole
/// tree is a pure function of (config, master_seed).
pub fn build_dataset(config: &DatasetConfig, root: &Path, master_seed: u64) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rows = Vec::new();
    let mut index = 0u64;
    let next_seed = |index: &mut u64| {
        let s = mix_seed(master_seed, *index);
        *index += 1;
        s
    };

    for _ in 0..config.n_train {
        let scene = generate_scene(&config.scene, next_seed(&mut index))?;
        rows.push(write_sample(
            root,
            Path::new("train"),
            Split::Train,
            &config.source,
            &scene,
        )?);
    }
    for _ in 0..config.n_val {
        let scene = generate_scene(&config.scene, next_seed(&mut index))?;
        rows.push(write_sample(
            root,
            Path::new("val"),
            Split::Val,
            &config.source,
            &scene,
        )?);
    }
    for _ in 0..config.n_test_per_domain {
        let scene = generate_scene(&config.scene, next_seed(&mut index))?;
        let mut styles: Vec<&DomainStyle> = vec![&config.source];
        styles.extend(config.targets.iter());
        for style in styles {
            rows.push(write_sample(
                root,
                &Path::new("test").join(&style.name),
                Split::Test,
                style,
                &scene,
            )?);
        }
    }

    let manifest = Manifest { rows };
    manifest.save(root)?;
    let config_text = toml::to_string_pretty(&SavedDatasetConfig {
        master_seed,
        dataset: config.clone(),
    })
    .map_err(|e| Error::Validation(format!("config serialization failed: {e}")))?;
    let cfg_path = root.join("dataset.toml");
    std::fs::write(&cfg_path, config_text).map_err(|e| Error::io(cfg_path, e))?;
    Ok(manifest)
}

#[derive(Serialize, Deserialize)]
struct SavedDatasetConfig {
    master_seed: u64,
    dataset: DatasetConfig,
}

/// The shipped styleA -> styleB benchmark.
///
/// Source (styleA): bright organs on a dark background with distinct
/// per-label intensities and a dense field of organ-intensity background
/// confounders — intensity alone cannot separate organs from clutter.
/// Target (styleB): the per-organ intensity ordering is inverted and
/// appearance is noisier/heterogeneous, so class identity must come from
/// shape rather than brightness.
pub fn default_benchmark() -> DatasetConfig {
    let scene = SceneConfig {
        canvas: (64, 64),
        num_labels: 5,
        shapes: vec![
            // label 1: large round ellipse
            LabelShape {
                kind: ShapeKind::Ellipse,
                axis_a: (11.0, 15.0),
                axis_b: (8.0, 11.0),
                wobble: (0.0, 0.0),
            },
            // label 2: rounded rectangle
            LabelShape {
                kind: ShapeKind::RoundedRect,
                axis_a: (7.0, 10.0),
                axis_b: (5.0, 7.0),
                wobble: (0.0, 0.0),
            },
            // label 3: strongly lobulated blob
            LabelShape {
                kind: ShapeKind::Blob,
                axis_a: (7.0, 10.0),
                axis_b: (6.0, 9.0),
                wobble: (0.10, 0.22),
            },
            // label 4: narrow elongated ellipse
            LabelShape {
                kind: ShapeKind::Ellipse,
                axis_a: (9.0, 12.0),
                axis_b: (3.0, 4.5),
                wobble: (0.0, 0.0),
            },
        ],
        placement_margin: 1.0,
        min_center_separation: 14.0,
        max_attempts: 400,
    };
    let source = DomainStyle {
        name: "styleA".into(),
        intensity: vec![
            IntensityStat { mean: 0.08, std: 0.02 },
            IntensityStat { mean: 0.88, std: 0.08 },
            IntensityStat { mean: 0.72, std: 0.08 },
            IntensityStat { mean: 0.56, std: 0.08 },
            IntensityStat { mean: 0.40, std: 0.08 },
        ],
        noise_amplitude: 0.03,
        noise_smoothing: 1,
        confounder_density: 8.0,
        confounder_intensity: (0.64, 0.18),
        confounder_size: (1.5, 4.0),
        bias_field_amplitude: 0.08,
    };
    let target = DomainStyle {
        name: "styleB".into(),
        intensity: vec![
            IntensityStat { mean: 0.08, std: 0.02 },
            IntensityStat { mean: 0.40, std: 0.05 },
            IntensityStat { mean: 0.56, std: 0.05 },
            IntensityStat { mean: 0.72, std: 0.05 },
            IntensityStat { mean: 0.88, std: 0.05 },
        ],
        noise_amplitude: 0.05,
        noise_smoothing: 1,
        confounder_density: 8.0,
        confounder_intensity: (0.64, 0.18),
        confounder_size: (1.5, 4.0),
        bias_field_amplitude: 0.12,
    };
    DatasetConfig {
        n_train: 100,
        n_val: 20,
        n_test_per_domain: 50,
        scene,
        source,
        targets: vec![target],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::read_tensor;

    fn tiny_config() -> DatasetConfig {
        let mut cfg = default_benchmark();
        cfg.n_train = 3;
        cfg.n_val = 2;
        cfg.n_test_per_domain = 2;
        cfg.scene.canvas = (32, 32);
        cfg.scene.shapes.truncate(2);
        cfg.scene.num_labels = 3;
        cfg.scene.min_center_separation = 8.0;
        cfg.source.intensity.truncate(3);
        cfg.targets[0].intensity.truncate(3);
        cfg
    }

    #[test]
    fn split_seeds_are_disjoint_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = build_dataset(&cfg, dir.path(), 5).unwrap();
        // 3 train + 2 val + 2 test scenes x 2 domains = 9 rows
        assert_eq!(manifest.rows.len(), 9);
        let train: BTreeSet<u64> = manifest
            .rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.scene_seed)
            .collect();
        let val: BTreeSet<u64> = manifest
            .rows
            .iter()
            .filter(|r| r.split == Split::Val)
            .map(|r| r.scene_seed)
            .collect();
        let test: BTreeSet<u64> = manifest
            .rows
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.scene_seed)
            .collect();
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
        // train/val come only from the source style
        assert!(manifest
            .rows
            .iter()
            .filter(|r| r.split != Split::Test)
            .all(|r| r.domain == "styleA"));
    }

    #[test]
    fn same_arguments_give_bit_identical_files() {
        let cfg = tiny_config();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_dataset(&cfg, a.path(), 11).unwrap();
        build_dataset(&cfg, b.path(), 11).unwrap();
        let manifest = Manifest::load(a.path()).unwrap();
        for row in &manifest.rows {
            let fa = std::fs::read(a.path().join(&row.image)).unwrap();
            let fb = std::fs::read(b.path().join(&row.image)).unwrap();
            assert_eq!(fa, fb, "image bytes differ for seed {}", row.scene_seed);
            let la = std::fs::read(a.path().join(&row.labels)).unwrap();
            let lb = std::fs::read(b.path().join(&row.labels)).unwrap();
            assert_eq!(la, lb);
        }
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_NAME)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_NAME)).unwrap()
        );
    }

    #[test]
    fn label_maps_are_identical_across_domains() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = build_dataset(&cfg, dir.path(), 23).unwrap();
        let test_rows: Vec<&ManifestRow> = manifest
            .rows
            .iter()
            .filter(|r| r.split == Split::Test)
            .collect();
        for row in &test_rows {
            for other in &test_rows {
                if row.scene_seed == other.scene_seed && row.domain != other.domain {
                    let a = read_tensor(&dir.path().join(&row.labels)).unwrap();
                    let b = read_tensor(&dir.path().join(&other.labels)).unwrap();
                    assert_eq!(a, b);
                    let ia = read_tensor(&dir.path().join(&row.image)).unwrap();
                    let ib = read_tensor(&dir.path().join(&other.image)).unwrap();
                    assert_ne!(ia, ib, "images should differ across styles");
                }
            }
        }
    }

    #[test]
    fn empty_target_list_is_source_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.targets.clear();
        let manifest = build_dataset(&cfg, dir.path(), 3).unwrap();
        assert!(manifest.rows.iter().all(|r| r.domain == "styleA"));
        assert_eq!(manifest.domains(Split::Test), vec!["styleA".to_string()]);
    }

    #[test]
    fn duplicate_style_names_rejected() {
        let mut cfg = tiny_config();
        cfg.targets[0].name = "styleA".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let manifest = build_dataset(&cfg, dir.path(), 8).unwrap();
        let back = Manifest::load(dir.path()).unwrap();
        assert_eq!(manifest.rows, back.rows);
    }
}
