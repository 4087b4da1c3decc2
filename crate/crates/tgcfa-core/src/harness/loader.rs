//! Manifest-driven dataset loader with read instrumentation.
//!
//! Every file read is recorded, and reads outside the allowed splits are
//! refused. The training loop opens the loader with {train, val} only,
//! which makes the source-only constraint mechanically checkable.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ndarray::{Array2, Array3, Ix2, Ix3};

use crate::error::{Error, Result};
use crate::synthdom::{Manifest, Split};
use crate::tensorio::read_tensor;

#[derive(Debug, Clone)]
pub struct LoadedSample {
    /// (channels, height, width) image in [0, 1].
    pub image: Array3<f32>,
    pub labels: Array2<u8>,
    pub domain: String,
    pub scene_seed: u64,
}

#[derive(Debug)]
pub struct InstrumentedLoader {
    root: PathBuf,
    manifest: Manifest,
    allowed: BTreeSet<Split>,
    log: Mutex<Vec<(Split, String, PathBuf)>>,
}

impl InstrumentedLoader {
    pub fn open(root: &Path, allowed: impl IntoIterator<Item = Split>) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            allowed: allowed.into_iter().collect(),
            log: Mutex::new(Vec::new()),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn domains(&self, split: Split) -> Vec<String> {
        self.manifest.domains(split)
    }

    /// Loads every sample of a split (optionally restricted to one
    /// domain), logging each file read.
    pub fn load_split(&self, split: Split, domain: Option<&str>) -> Result<Vec<LoadedSample>> {
        if !self.allowed.contains(&split) {
            return Err(Error::Hygiene(format!(
                "loader is restricted to {:?}; refusing to read split '{split}'",
                self.allowed
            )));
        }
        let rows: Vec<_> = self
            .manifest
            .rows
            .iter()
            .filter(|r| r.split == split && domain.map_or(true, |d| r.domain == d))
            .collect();
        if rows.is_empty() {
            let available = self.domains(split).join(", ");
            return Err(Error::Validation(match domain {
                Some(d) => format!(
                    "no samples for domain '{d}' in split '{split}' (available: {available})"
                ),
                None => format!("split '{split}' is empty"),
            }));
        }
        let mut samples = Vec::with_capacity(rows.len());
        for row in rows {
            let image_path = self.root.join(&row.image);
            let labels_path = self.root.join(&row.labels);
            {
                let mut log = self.log.lock().expect("loader log poisoned");
                log.push((row.split, row.domain.clone(), image_path.clone()));
                log.push((row.split, row.domain.clone(), labels_path.clone()));
            }
            let image = read_tensor(&image_path)?
                .as_f32()?
                .clone()
                .into_dimensionality::<Ix3>()
                .map_err(|e| Error::format(&image_path, e.to_string()))?;
            let labels = read_tensor(&labels_path)?
                .as_u8()?
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::format(&labels_path, e.to_string()))?;
            if image.dim().1 != labels.dim().0 || image.dim().2 != labels.dim().1 {
                return Err(Error::Validation(format!(
                    "image {:?} and labels {:?} disagree for seed {}",
                    image.dim(),
                    labels.dim(),
                    row.scene_seed
                )));
            }
            samples.push(LoadedSample {
                image,
                labels,
                domain: row.domain.clone(),
                scene_seed: row.scene_seed,
            });
        }
        Ok(samples)
    }

    /// Read counts keyed by "split/domain".
    pub fn read_counts(&self) -> BTreeMap<String, usize> {
        let log = self.log.lock().expect("loader log poisoned");
        let mut counts = BTreeMap::new();
        for (split, domain, _) in log.iter() {
            *counts.entry(format!("{split}/{domain}")).or_insert(0) += 1;
        }
        counts
    }

    /// Full read log (split, domain, path) in read order.
    pub fn read_log(&self) -> Vec<(Split, String, PathBuf)> {
        self.log.lock().expect("loader log poisoned").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdom::{build_dataset, default_benchmark};

    fn build_tiny(dir: &Path) {
        let mut cfg = default_benchmark();
        cfg.n_train = 2;
        cfg.n_val = 1;
        cfg.n_test_per_domain = 1;
        build_dataset(&cfg, dir, 77).unwrap();
    }

    #[test]
    fn refuses_disallowed_splits_and_logs_reads() {
        let dir = tempfile::tempdir().unwrap();
        build_tiny(dir.path());
        let loader = InstrumentedLoader::open(dir.path(), [Split::Train, Split::Val]).unwrap();
        let train = loader.load_split(Split::Train, None).unwrap();
        assert_eq!(train.len(), 2);
        assert!(matches!(
            loader.load_split(Split::Test, None),
            Err(Error::Hygiene(_))
        ));
        let counts = loader.read_counts();
        assert_eq!(counts.get("train/styleA"), Some(&4));
        assert!(counts.keys().all(|k| !k.starts_with("test/")));
    }

    #[test]
    fn unknown_domain_lists_available() {
        let dir = tempfile::tempdir().unwrap();
        build_tiny(dir.path());
        let loader = InstrumentedLoader::open(dir.path(), [Split::Test]).unwrap();
        match loader.load_split(Split::Test, Some("styleZ")) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains("styleA") && msg.contains("styleB"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn loads_well_formed_samples() {
        let dir = tempfile::tempdir().unwrap();
        build_tiny(dir.path());
        let loader = InstrumentedLoader::open(dir.path(), [Split::Test]).unwrap();
        let samples = loader.load_split(Split::Test, Some("styleB")).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!(s.image.dim().0, 1);
        assert_eq!(s.image.dim().1, s.labels.dim().0);
        assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
