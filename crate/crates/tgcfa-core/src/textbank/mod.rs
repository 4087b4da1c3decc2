//! Label descriptions and label-wise text embedding tables.
//!
//! Each segmentation label carries a handful of free-text description
//! variants. A frozen [`TextEncoder`] maps every variant to a vector and
//! the per-label table row is the arithmetic mean of its variants.

mod provider;

use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::error::{Error, Result};

pub use provider::{Embedding, ImportEncoder, PretrainedEncoder, ProviderKind, StubEncoder, TextEncoder};

/// One segmentation label with its description variants.
#[derive(Debug, Clone)]
pub struct LabelDescriptor {
    pub label_id: usize,
    pub label_name: String,
    pub descriptions: Vec<String>,
}

/// Validated set of label descriptors with ids contiguous from 0.
#[derive(Debug, Clone)]
pub struct DescriptionSet {
    labels: Vec<LabelDescriptor>,
    background_id: Option<usize>,
}

#[derive(Deserialize)]
struct RawDescriptionFile {
    labels: Vec<RawLabel>,
    #[serde(default)]
    background_id: Option<usize>,
}

#[derive(Deserialize)]
struct RawLabel {
    id: usize,
    name: String,
    descriptions: Vec<String>,
}

impl DescriptionSet {
    /// Validates and normalises raw descriptors: ids must be unique and
    /// contiguous from 0, every label needs at least one non-blank
    /// description, and `background_id` (if set) must exist.
    pub fn new(mut labels: Vec<LabelDescriptor>, background_id: Option<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("description set has no labels".into()));
        }
        labels.sort_by_key(|l| l.label_id);
        for (expect, label) in labels.iter().enumerate() {
            if label.label_id != expect {
                return Err(Error::Validation(format!(
                    "label ids must be unique and contiguous from 0; expected {expect}, found {} ({})",
                    label.label_id, label.label_name
                )));
            }
            if label.descriptions.is_empty() {
                return Err(Error::Validation(format!(
                    "label {} ({}) has no descriptions",
                    label.label_id, label.label_name
                )));
            }
            for (vi, text) in label.descriptions.iter().enumerate() {
                if text.trim().is_empty() {
                    return Err(Error::Validation(format!(
                        "label {} ({}) description {vi} is blank",
                        label.label_id, label.label_name
                    )));
                }
            }
        }
        if let Some(bg) = background_id {
            if bg >= labels.len() {
                return Err(Error::Validation(format!(
                    "background_id {bg} does not name an existing label (n = {})",
                    labels.len()
                )));
            }
        }
        Ok(Self {
            labels,
            background_id,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[LabelDescriptor] {
        &self.labels
    }

    pub fn background_id(&self) -> Option<usize> {
        self.background_id
    }

    pub fn label_names(&self) -> Vec<String> {
        self.labels.iter().map(|l| l.label_name.clone()).collect()
    }
}

/// Loads a JSON description file:
/// `{ "labels": [{"id", "name", "descriptions": [...]}, ...], "background_id"? }`.
pub fn load_descriptions(path: &Path) -> Result<DescriptionSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawDescriptionFile = serde_json::from_str(&text).map_err(|e| {
        Error::schema(
            path,
            format!("line {}, column {}: {e}", e.line(), e.column()),
        )
    })?;
    let labels = raw
        .labels
        .into_iter()
        .map(|l| LabelDescriptor {
            label_id: l.id,
            label_name: l.name,
            descriptions: l.descriptions,
        })
        .collect();
    DescriptionSet::new(labels, raw.background_id)
        .map_err(|e| Error::schema(path, e.to_string()))
}

/// Component-wise arithmetic mean of variant embeddings.
pub fn aggregate_label_embedding(variants: &[Vec<f32>]) -> Result<Vec<f32>> {
    let first = variants
        .first()
        .ok_or_else(|| Error::Validation("cannot aggregate an empty variant list".into()))?;
    let k = first.len();
    let mut mean = vec![0.0f64; k];
    for v in variants {
        if v.len() != k {
            return Err(Error::Validation(format!(
                "variant dimension mismatch: {} vs {k}",
                v.len()
            )));
        }
        for (m, &x) in mean.iter_mut().zip(v.iter()) {
            *m += x as f64;
        }
    }
    let inv = 1.0 / variants.len() as f64;
    Ok(mean.iter().map(|&m| (m * inv) as f32).collect())
}

/// Per-label mean text embeddings, row r is label r's vector.
#[derive(Debug, Clone)]
pub struct TextEmbeddingTable {
    embeddings: Array2<f32>,
    label_names: Vec<String>,
    encoder_fingerprint: String,
}

/// Options for [`build_table`].
#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// L2-normalize each variant before averaging (off by default: the
    /// table row is the mean of raw variant embeddings).
    pub normalize_variants: bool,
}

/// Result of building a table, including non-fatal warnings (e.g. texts
/// that were truncated to the provider's token limit).
#[derive(Debug)]
pub struct BuildReport {
    pub table: TextEmbeddingTable,
    pub warnings: Vec<String>,
}

impl TextEmbeddingTable {
    pub fn from_parts(
        embeddings: Array2<f32>,
        label_names: Vec<String>,
        encoder_fingerprint: String,
    ) -> Result<Self> {
        let (n, k) = embeddings.dim();
        if n == 0 || k == 0 {
            return Err(Error::Validation(format!(
                "embedding table must be non-degenerate, got {n}x{k}"
            )));
        }
        if label_names.len() != n {
            return Err(Error::Validation(format!(
                "{} label names for {n} rows",
                label_names.len()
            )));
        }
        if let Some(v) = embeddings.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("embedding table entry {v}"),
            });
        }
        Ok(Self {
            embeddings,
            label_names,
            encoder_fingerprint,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn fingerprint(&self) -> &str {
        &self.encoder_fingerprint
    }

    pub fn row(&self, r: usize) -> Result<&[f32]> {
        if r >= self.num_labels() {
            return Err(Error::IndexOutOfRange {
                index: r,
                len: self.num_labels(),
            });
        }
        Ok(self.embeddings.row(r).to_slice().expect("row-major table"))
    }

    /// The matrix as f64, the precision the alignment losses compute in.
    pub fn embeddings_f64(&self) -> Array2<f64> {
        self.embeddings.mapv(|v| v as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        table_io::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        table_io::load(path)
    }
}

/// Builds the per-label mean embedding table from a description set.
///
/// Embedding is deterministic for a fixed provider, so variants can be
/// encoded in any order; rows follow the label ids.
pub fn build_table(
    set: &DescriptionSet,
    encoder: &dyn TextEncoder,
    opts: &BuildOptions,
) -> Result<BuildReport> {
    let mut warnings = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(set.num_labels());
    let mut dim = None;
    for label in set.labels() {
        let mut variants = Vec::with_capacity(label.descriptions.len());
        for (vi, text) in label.descriptions.iter().enumerate() {
            let emb = encoder.embed(text).map_err(|e| {
                Error::Encoder(format!(
                    "label {} ({}) variant {vi}: {e}",
                    label.label_id, label.label_name
                ))
            })?;
            if emb.truncated {
                warnings.push(format!(
                    "label {} ({}) variant {vi} exceeded the provider token limit and was truncated",
                    label.label_id, label.label_name
                ));
            }
            let mut values = emb.values;
            if opts.normalize_variants {
                let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    for v in &mut values {
                        *v = (*v as f64 / norm) as f32;
                    }
                }
            }
            match dim {
                None => dim = Some(values.len()),
                Some(k) if k != values.len() => {
                    return Err(Error::Validation(format!(
                        "label {} ({}): embedding dimension {} does not match table dimension {k}",
                        label.label_id,
                        label.label_name,
                        values.len()
                    )))
                }
                _ => {}
            }
            variants.push(values);
        }
        rows.push(aggregate_label_embedding(&variants)?);
    }
    let n = rows.len();
    let k = dim.expect("at least one label");
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let embeddings = Array2::from_shape_vec((n, k), flat).expect("consistent row dims");
    let variant_counts: Vec<usize> = set.labels().iter().map(|l| l.descriptions.len()).collect();
    let fingerprint = format!("{};n={n};v={variant_counts:?}", encoder.id());
    let table = TextEmbeddingTable::from_parts(embeddings, set.label_names(), fingerprint)?;
    Ok(BuildReport { table, warnings })
}

mod table_io {
    //! Embedding table container: magic `TGTB`, u32 version=1, u32 n,
    //! u32 k, u32 fingerprint length, fingerprint bytes, n*k f32
    //! row-major little-endian values.

    use std::io::Read;
    use std::path::Path;

    use ndarray::Array2;

    use super::TextEmbeddingTable;
    use crate::error::{Error, Result};

    pub const TABLE_MAGIC: &[u8; 4] = b"TGTB";
    pub const TABLE_VERSION: u32 = 1;

    pub fn save(table: &TextEmbeddingTable, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(TABLE_MAGIC);
        buf.extend_from_slice(&TABLE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(table.num_labels() as u32).to_le_bytes());
        buf.extend_from_slice(&(table.dim() as u32).to_le_bytes());
        let fp = table.encoder_fingerprint.as_bytes();
        buf.extend_from_slice(&(fp.len() as u32).to_le_bytes());
        buf.extend_from_slice(fp);
        for &v in table.embeddings.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<TextEmbeddingTable> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        read(&mut r, &mut magic, path)?;
        if &magic != TABLE_MAGIC {
            return Err(Error::format(path, "bad magic (expected TGTB)"));
        }
        let version = read_u32(&mut r, path)?;
        if version != TABLE_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r, path)? as usize;
        let k = read_u32(&mut r, path)? as usize;
        if n == 0 || k == 0 || n > u32::MAX as usize / 4 / k.max(1) {
            return Err(Error::format(path, format!("implausible dimensions {n}x{k}")));
        }
        let fp_len = read_u32(&mut r, path)? as usize;
        let mut fp = vec![0u8; fp_len];
        read(&mut r, &mut fp, path)?;
        let fingerprint = String::from_utf8(fp)
            .map_err(|_| Error::format(path, "fingerprint is not UTF-8"))?;
        let mut payload = vec![0u8; n * k * 4];
        read(&mut r, &mut payload, path)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let embeddings = Array2::from_shape_vec((n, k), values).expect("sized above");
        // Label names are not part of the on-disk format; callers that need
        // them re-attach names from the description set.
        let label_names = (0..n).map(|r| format!("label_{r}")).collect();
        TextEmbeddingTable::from_parts(embeddings, label_names, fingerprint)
    }

    fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
        let mut buf = [0u8; 4];
        read(r, &mut buf, path)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
        r.read_exact(buf)
            .map_err(|_| Error::format(path, "truncated file"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn descriptor(id: usize, name: &str, texts: &[&str]) -> LabelDescriptor {
        LabelDescriptor {
            label_id: id,
            label_name: name.to_string(),
            descriptions: texts.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let labels = vec![
            descriptor(0, "liver", &["bright organ"]),
            descriptor(0, "spleen", &["oval organ"]),
        ];
        assert!(DescriptionSet::new(labels, None).is_err());
    }

    #[test]
    fn empty_description_list_rejected() {
        let labels = vec![LabelDescriptor {
            label_id: 0,
            label_name: "liver".into(),
            descriptions: vec![],
        }];
        assert!(DescriptionSet::new(labels, None).is_err());
    }

    #[test]
    fn blank_description_rejected() {
        let labels = vec![descriptor(0, "liver", &["  "])];
        assert!(DescriptionSet::new(labels, None).is_err());
    }

    #[test]
    fn single_label_single_variant_is_valid() {
        let set = DescriptionSet::new(vec![descriptor(0, "liver", &["a large organ"])], None).unwrap();
        assert_eq!(set.num_labels(), 1);
    }

    #[test]
    fn aggregate_hand_computed_mean() {
        let mean = aggregate_label_embedding(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(mean, vec![0.5, 0.5]);
    }

    #[test]
    fn aggregate_single_variant_is_identity() {
        let u = vec![0.3, -1.25, 4.0];
        assert_eq!(aggregate_label_embedding(&[u.clone()]).unwrap(), u);
    }

    #[test]
    fn aggregate_identical_variants_is_identity() {
        let u = vec![0.5, 2.0, -0.125];
        let mean = aggregate_label_embedding(&[u.clone(), u.clone(), u.clone()]).unwrap();
        for (a, b) in mean.iter().zip(u.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn aggregate_dimension_mismatch_rejected() {
        assert!(aggregate_label_embedding(&[vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(aggregate_label_embedding(&[]).is_err());
    }

    #[test]
    fn stub_embedding_is_deterministic() {
        let enc = StubEncoder::new(16);
        let a = enc.embed("liver appears bright").unwrap();
        let b = enc.embed("liver appears bright").unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.values.len(), 16);
    }

    #[test]
    fn stub_rejects_empty_text() {
        let enc = StubEncoder::new(8);
        assert!(enc.embed("").is_err());
        assert!(enc.embed("   ").is_err());
    }

    #[test]
    fn stub_flags_truncation() {
        let enc = StubEncoder::new(8);
        let long: String = std::iter::repeat("word").take(100).collect::<Vec<_>>().join(" ");
        let emb = enc.embed(&long).unwrap();
        assert!(emb.truncated);
    }

    #[test]
    fn build_table_v1_rows_equal_variant_embeddings() {
        let set = DescriptionSet::new(
            vec![
                descriptor(0, "liver", &["the liver is large"]),
                descriptor(1, "spleen", &["the spleen is oval"]),
            ],
            None,
        )
        .unwrap();
        let enc = StubEncoder::new(12);
        let report = build_table(&set, &enc, &BuildOptions::default()).unwrap();
        for (r, label) in set.labels().iter().enumerate() {
            let direct = enc.embed(&label.descriptions[0]).unwrap();
            let row = report.table.row(r).unwrap();
            assert_eq!(row, direct.values.as_slice());
        }
    }

    #[test]
    fn build_table_two_calls_identical() {
        let set = DescriptionSet::new(
            vec![descriptor(0, "liver", &["big", "bright", "smooth"])],
            None,
        )
        .unwrap();
        let enc = StubEncoder::new(24);
        let a = build_table(&set, &enc, &BuildOptions::default()).unwrap();
        let b = build_table(&set, &enc, &BuildOptions::default()).unwrap();
        assert_eq!(a.table.embeddings(), b.table.embeddings());
        assert_eq!(a.table.fingerprint(), b.table.fingerprint());
    }

    #[test]
    fn table_round_trip_bit_exact() {
        let set = DescriptionSet::new(
            vec![
                descriptor(0, "liver", &["large wedge organ", "smooth texture"]),
                descriptor(1, "kidney", &["bean shaped"]),
            ],
            None,
        )
        .unwrap();
        let enc = StubEncoder::new(9);
        let table = build_table(&set, &enc, &BuildOptions::default()).unwrap().table;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.tgtb");
        table.save(&path).unwrap();
        let back = TextEmbeddingTable::load(&path).unwrap();
        assert_eq!(back.num_labels(), table.num_labels());
        assert_eq!(back.dim(), table.dim());
        assert_eq!(back.fingerprint(), table.fingerprint());
        for (a, b) in table.embeddings().iter().zip(back.embeddings().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn table_load_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.tgtb");
        let set =
            DescriptionSet::new(vec![descriptor(0, "liver", &["large organ"])], None).unwrap();
        let table = build_table(&set, &StubEncoder::new(6), &BuildOptions::default())
            .unwrap()
            .table;
        table.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            TextEmbeddingTable::load(&path),
            Err(Error::Format { .. })
        ));
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        std::fs::write(&path, &corrupt).unwrap();
        assert!(matches!(
            TextEmbeddingTable::load(&path),
            Err(Error::Format { .. })
        ));
    }

    proptest! {
        // Mean aggregation is linear in its inputs and permutation invariant.
        #[test]
        fn aggregate_scales_linearly(
            u in proptest::collection::vec(-10.0f32..10.0, 4),
            v in proptest::collection::vec(-10.0f32..10.0, 4),
            alpha in -4.0f32..4.0,
        ) {
            let base = aggregate_label_embedding(&[u.clone(), v.clone()]).unwrap();
            let scaled = aggregate_label_embedding(&[
                u.iter().map(|x| alpha * x).collect(),
                v.iter().map(|x| alpha * x).collect(),
            ]).unwrap();
            for (s, b) in scaled.iter().zip(base.iter()) {
                prop_assert!((s - alpha * b).abs() <= 1e-4);
            }
        }

        #[test]
        fn aggregate_permutation_invariant(
            vs in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 1..6),
        ) {
            let forward = aggregate_label_embedding(&vs).unwrap();
            let mut rev = vs.clone();
            rev.reverse();
            let backward = aggregate_label_embedding(&rev).unwrap();
            for (a, b) in forward.iter().zip(backward.iter()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
