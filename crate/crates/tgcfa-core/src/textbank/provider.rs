//! Pluggable frozen text encoders.
//!
//! Three providers share one trait: a deterministic stub (hash-seeded unit
//! vectors, no external weights), an import provider that reads per-text
//! embeddings exported by an external script, and a pretrained provider
//! backed by a local embedding cache.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;

use crate::error::{Error, Result};

/// Which provider a CLI or config selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    Stub,
    Import,
    Pretrained,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(ProviderKind::Stub),
            "import" => Ok(ProviderKind::Import),
            "pretrained" => Ok(ProviderKind::Pretrained),
            other => Err(Error::Validation(format!(
                "unknown provider '{other}' (expected stub, import, or pretrained)"
            ))),
        }
    }
}

/// A single text embedding plus whether the input was truncated to the
/// provider's token limit.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub values: Vec<f32>,
    pub truncated: bool,
}

/// A frozen text encoder: deterministic, no gradients, no training state.
pub trait TextEncoder: Send + Sync {
    /// Stable identifier recorded in table fingerprints.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding>;
}

/// Deterministic stand-in encoder.
///
/// Each lowercased token is hashed (FNV-1a) to seed a ChaCha stream that
/// yields a unit Gaussian direction; token vectors are summed and the sum
/// L2-normalized. Pure function of the text, identical across runs and
/// platforms.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    dim: usize,
    token_limit: usize,
}

impl StubEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            token_limit: 77,
        }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

impl TextEncoder for StubEncoder {
    fn id(&self) -> String {
        format!("stub(dim={})", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let tokens: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| t.to_lowercase())
            .collect();
        if tokens.is_empty() {
            return Err(Error::Encoder("cannot embed empty text".into()));
        }
        let truncated = tokens.len() > self.token_limit;
        let used = &tokens[..tokens.len().min(self.token_limit)];
        let mut sum = vec![0.0f64; self.dim];
        for token in used {
            for (s, t) in sum.iter_mut().zip(self.token_vector(token)) {
                *s += t;
            }
        }
        let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for s in &mut sum {
                *s /= norm;
            }
        }
        Ok(Embedding {
            values: sum.iter().map(|&x| x as f32).collect(),
            truncated,
        })
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Deserialize)]
struct ImportFile {
    encoder: String,
    dim: usize,
    items: Vec<ImportItem>,
}

#[derive(Deserialize)]
struct ImportItem {
    text: String,
    vector: Vec<f32>,
}

/// Reads per-text embeddings exported by an external script
/// (`{"encoder", "dim", "items": [{"text", "vector"}]}`), keyed by the
/// exact description string.
pub struct ImportEncoder {
    encoder_name: String,
    dim: usize,
    by_text: HashMap<String, Vec<f32>>,
}

impl ImportEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: ImportFile = serde_json::from_str(&text)
            .map_err(|e| Error::schema(path, format!("line {}: {e}", e.line())))?;
        if raw.dim == 0 {
            return Err(Error::schema(path, "dim must be positive"));
        }
        let mut by_text = HashMap::with_capacity(raw.items.len());
        for item in raw.items {
            if item.vector.len() != raw.dim {
                return Err(Error::schema(
                    path,
                    format!(
                        "entry '{}' has dimension {} but file declares {}",
                        truncate_for_msg(&item.text),
                        item.vector.len(),
                        raw.dim
                    ),
                ));
            }
            by_text.insert(item.text, item.vector);
        }
        Ok(Self {
            encoder_name: raw.encoder,
            dim: raw.dim,
            by_text,
        })
    }
}

impl TextEncoder for ImportEncoder {
    fn id(&self) -> String {
        format!("import({};dim={})", self.encoder_name, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        let values = self.by_text.get(text).ok_or_else(|| {
            Error::Encoder(format!(
                "import file has no embedding for '{}'",
                truncate_for_msg(text)
            ))
        })?;
        Ok(Embedding {
            values: values.clone(),
            truncated: false,
        })
    }
}

/// Frozen pretrained encoder backed by a local embedding cache directory.
///
/// The cache holds one import-format JSON per description file (written by
/// `scripts/export_text_embeddings.py` against a real language-image text
/// tower). Without a cache the provider reports itself unavailable rather
/// than downloading weights.
pub struct PretrainedEncoder {
    inner: ImportEncoder,
}

impl PretrainedEncoder {
    pub const CACHE_ENV: &'static str = "TGCFA_TEXT_CACHE";

    pub fn open(cache_file: Option<&Path>) -> Result<Self> {
        let path: PathBuf = match cache_file {
            Some(p) => p.to_path_buf(),
            None => std::env::var_os(Self::CACHE_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| {
                    Error::Encoder(format!(
                        "pretrained encoder unavailable: no cache file given and {} is unset; \
                         export embeddings with scripts/export_text_embeddings.py first",
                        Self::CACHE_ENV
                    ))
                })?,
        };
        if !path.exists() {
            return Err(Error::Encoder(format!(
                "pretrained encoder unavailable: cache file {} does not exist",
                path.display()
            )));
        }
        Ok(Self {
            inner: ImportEncoder::load(&path)?,
        })
    }
}

impl TextEncoder for PretrainedEncoder {
    fn id(&self) -> String {
        format!("pretrained({};dim={})", self.inner.encoder_name, self.inner.dim)
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        self.inner.embed(text)
    }
}

fn truncate_for_msg(text: &str) -> String {
    if text.chars().count() <= 40 {
        text.to_string()
    } else {
        let head: String = text.chars().take(37).collect();
        format!("{head}...")
    }
}
