//! Paired baseline-vs-aligned comparison across seeds.
//!
//! Each seed trains both arms with identical initialization and data
//! order; the only difference is the alignment term. Per-domain test
//! Dice is compared pairwise, which removes seed-level variance from the
//! comparison.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdom::Split;

use super::loader::InstrumentedLoader;
use super::train::{evaluate_samples, train_full};
use super::{ExperimentConfig, RunRecord};

pub const TREND_SUMMARY_FILE: &str = "trend_summary.json";

/// One trained arm's results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendArm {
    pub run: RunRecord,
    /// Mean foreground Dice on the test split, per domain.
    pub per_domain: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedTrend {
    pub seed: u64,
    pub baseline: TrendArm,
    pub aligned: TrendArm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendSummary {
    pub seeds: Vec<u64>,
    pub source_domain: String,
    pub target_domains: Vec<String>,
    pub per_seed: Vec<SeedTrend>,
    /// aligned - baseline mean foreground Dice, per domain, one entry
    /// per seed (in `seeds` order).
    pub paired_diff: BTreeMap<String, Vec<f64>>,
    pub mean_diff: BTreeMap<String, f64>,
    pub positive_count: BTreeMap<String, usize>,
}

impl TrendSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("trend serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
    }
}

/// Trains baseline and aligned arms for every seed and summarizes the
/// paired per-domain differences.
pub fn run_trend_study(
    config: &ExperimentConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<TrendSummary> {
    if seeds.len() < 3 {
        return Err(Error::Validation(format!(
            "trend study needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let data_dir = config.resolve_data_dir()?;
    let eval_loader = InstrumentedLoader::open(&data_dir, [Split::Train, Split::Test])?;
    let source_domain = eval_loader
        .domains(Split::Train)
        .first()
        .cloned()
        .ok_or_else(|| Error::Validation("dataset has no train split".into()))?;
    let test_domains = eval_loader.domains(Split::Test);
    if test_domains.is_empty() {
        return Err(Error::Validation("dataset has no test split".into()));
    }

    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut arms: Vec<TrendArm> = Vec::with_capacity(2);
        for (arm_name, align_enabled) in [("baseline", false), ("aligned", true)] {
            let mut arm_cfg = config.clone();
            arm_cfg.seed = seed;
            arm_cfg.align.enabled = align_enabled;
            let arm_dir = out_dir.join(format!("seed{seed}")).join(arm_name);
            let (run, model) = train_full(&arm_cfg, &arm_dir)?;
            let mut per_domain = BTreeMap::new();
            for domain in &test_domains {
                let samples = eval_loader.load_split(Split::Test, Some(domain))?;
                let report = evaluate_samples(&model.unet, &samples, config.background_id)?;
                per_domain.insert(domain.clone(), report.mean_foreground);
            }
            arms.push(TrendArm { run, per_domain });
        }
        let aligned = arms.pop().expect("two arms");
        let baseline = arms.pop().expect("two arms");
        per_seed.push(SeedTrend {
            seed,
            baseline,
            aligned,
        });
    }

    let mut paired_diff: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for trend in &per_seed {
        for domain in &test_domains {
            let b = trend.baseline.per_domain[domain];
            let a = trend.aligned.per_domain[domain];
            paired_diff.entry(domain.clone()).or_default().push(a - b);
        }
    }
    let mean_diff: BTreeMap<String, f64> = paired_diff
        .iter()
        .map(|(d, v)| (d.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let positive_count: BTreeMap<String, usize> = paired_diff
        .iter()
        .map(|(d, v)| (d.clone(), v.iter().filter(|x| **x > 0.0).count()))
        .collect();

    let summary = TrendSummary {
        seeds: seeds.to_vec(),
        source_domain: source_domain.clone(),
        target_domains: test_domains
            .into_iter()
            .filter(|d| *d != source_domain)
            .collect(),
        per_seed,
        paired_diff,
        mean_diff,
        positive_count,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    summary.save(&out_dir.join(TREND_SUMMARY_FILE))?;
    Ok(summary)
}
