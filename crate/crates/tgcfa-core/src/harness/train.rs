//! The training loop: batch-parallel forward/backward, Adam updates,
//! per-epoch source validation, and best-checkpoint retention.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Ix1, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::alignhead::{
    alignment_loss_with_grad, derive_feature_masks, project_features, projection_backward,
    AlignConfig, AlignmentLoss, FeatureGrid, FeatureLevelMask, ProjectionParams,
};
use crate::error::{Error, Result};
use crate::segcore::checkpoint::{Checkpoint, CheckpointTensor};
use crate::segcore::{
    dice_score, segmentation_loss_with_grad, total_loss, DiceReport, GradVec, UNet,
};
use crate::synthdom::{mix_seed, mix_seed_str, Split};
use crate::textbank::TextEmbeddingTable;

use super::loader::{InstrumentedLoader, LoadedSample};
use super::optim::Adam;
use super::{EpochRecord, ExperimentConfig, RunRecord};

pub const CHECKPOINT_FILE: &str = "checkpoint.tgck";
pub const RUN_RECORD_FILE: &str = "run_record.json";

/// A trained (or freshly initialized, for zero-epoch runs) model.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub unet: UNet,
    pub projection: Option<ProjectionParams>,
    pub config: ExperimentConfig,
}

/// Deterministic batch composition: a pure function of (seed, epoch).
pub fn batch_order(seed: u64, epoch: usize, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed_str(seed, "order"), epoch as u64));
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    indices
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

struct SampleOutput {
    l_seg: f64,
    align: Option<AlignmentLoss>,
    grads: GradVec,
    proj_grads: Option<(Array2<f64>, Array1<f64>)>,
}

#[allow(clippy::too_many_arguments)]
fn sample_step(
    model: &UNet,
    projection: Option<&ProjectionParams>,
    table: Option<&Array2<f64>>,
    mask: Option<&FeatureLevelMask>,
    sample: &LoadedSample,
    config: &ExperimentConfig,
    align_cfg: &AlignConfig,
) -> Result<SampleOutput> {
    let (cache, logits) = model.forward(&sample.image)?;
    let (l_seg, dlogits) =
        segmentation_loss_with_grad(&logits, &sample.labels.view(), &config.seg_loss)?;
    let mut align_out = None;
    let mut d_bottleneck: Option<Array3<f32>> = None;
    let mut proj_grads = None;
    if let (Some(params), Some(table), Some(mask)) = (projection, table, mask) {
        let grid = FeatureGrid::from_chw(cache.bottleneck())?;
        let proj = project_features(&grid, params)?;
        let (loss, d_proj) = alignment_loss_with_grad(&proj, table, mask, align_cfg)?;
        let pg = projection_backward(&grid, params, &d_proj)?;
        let lambda = config.align.lambda;
        let (z, gh, gw) = cache.bottleneck().dim();
        let mut db = Array3::<f32>::zeros((z, gh, gw));
        for c in 0..z {
            for y in 0..gh {
                for x in 0..gw {
                    db[[c, y, x]] = (lambda * pg.d_features[[y * gw + x, c]]) as f32;
                }
            }
        }
        d_bottleneck = Some(db);
        proj_grads = Some((
            pg.d_weight.mapv(|v| lambda * v),
            pg.d_bias.mapv(|v| lambda * v),
        ));
        align_out = Some(loss);
    }
    let grads = model.backward(&cache, &dlogits, d_bottleneck.as_ref());
    Ok(SampleOutput {
        l_seg,
        align: align_out,
        grads,
        proj_grads,
    })
}

fn zero_alignment() -> AlignmentLoss {
    AlignmentLoss {
        l_pos: 0.0,
        l_neg: 0.0,
        l_align: 0.0,
        per_cell: None,
        skipped_cells: 0,
        skipped_terms: 0,
        empty_positive_cells: 0,
    }
}

fn build_checkpoint(
    config: &ExperimentConfig,
    model: &UNet,
    projection: Option<&ProjectionParams>,
) -> Result<Checkpoint> {
    let mut tensors: Vec<(String, CheckpointTensor)> = model
        .params
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), CheckpointTensor::F32(t.value.clone())))
        .collect();
    if let Some(p) = projection {
        tensors.push((
            "projection.weight".into(),
            CheckpointTensor::F64(p.weight.clone().into_dyn()),
        ));
        tensors.push((
            "projection.bias".into(),
            CheckpointTensor::F64(p.bias.clone().into_dyn()),
        ));
    }
    Ok(Checkpoint {
        config_hash: config.config_hash(),
        meta: config.to_toml()?,
        tensors,
    })
}

/// Rebuilds the model (and projection, when present) from a checkpoint.
pub fn load_trained_model(path: &Path) -> Result<TrainedModel> {
    let ckpt = Checkpoint::load(path)?;
    let config: ExperimentConfig =
        toml::from_str(&ckpt.meta).map_err(|e| Error::format(path, format!("bad meta: {e}")))?;
    let mut unet = UNet::init(config.backbone.clone(), 0)?;
    for tensor in unet.params.tensors_mut() {
        match ckpt.get(&tensor.name) {
            Some(CheckpointTensor::F32(v)) if v.shape() == tensor.value.shape() => {
                tensor.value.assign(v);
            }
            Some(_) => {
                return Err(Error::format(
                    path,
                    format!("tensor '{}' has wrong dtype or shape", tensor.name),
                ))
            }
            None => {
                return Err(Error::format(
                    path,
                    format!("checkpoint is missing tensor '{}'", tensor.name),
                ))
            }
        }
    }
    let projection = match (ckpt.get("projection.weight"), ckpt.get("projection.bias")) {
        (Some(CheckpointTensor::F64(w)), Some(CheckpointTensor::F64(b))) => {
            let weight = w
                .clone()
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::format(path, e.to_string()))?;
            let bias = b
                .clone()
                .into_dimensionality::<Ix1>()
                .map_err(|e| Error::format(path, e.to_string()))?;
            Some(ProjectionParams::new(weight, bias)?)
        }
        _ => None,
    };
    Ok(TrainedModel {
        unet,
        projection,
        config,
    })
}

/// Mean Dice report over a set of samples.
pub fn evaluate_samples(
    model: &UNet,
    samples: &[LoadedSample],
    background: Option<usize>,
) -> Result<DiceReport> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty sample set".into()));
    }
    let n = model.config.num_classes;
    let reports: Result<Vec<DiceReport>> = samples
        .par_iter()
        .map(|s| {
            let pred = model.predict_labels(&s.image)?;
            dice_score(pred.view(), s.labels.view(), n, background)
        })
        .collect();
    let reports = reports?;
    let count = reports.len() as f64;
    let mut per_class = vec![0.0f64; n];
    let mut fg = 0.0;
    for r in &reports {
        for (acc, v) in per_class.iter_mut().zip(r.per_class.iter()) {
            *acc += v;
        }
        fg += r.mean_foreground;
    }
    for v in &mut per_class {
        *v /= count;
    }
    Ok(DiceReport {
        per_class,
        mean_foreground: fg / count,
    })
}

/// Trains per the config, writing the best-validation checkpoint and run
/// record under `out_dir`, and returns the record plus the best model.
pub fn train_full(config: &ExperimentConfig, out_dir: &Path) -> Result<(RunRecord, TrainedModel)> {
    let start = Instant::now();
    config.validate()?;
    let data_dir = config.resolve_data_dir()?;
    let table = TextEmbeddingTable::load(&config.table_path)?;
    if config.align.enabled && table.num_labels() != config.backbone.num_classes {
        return Err(Error::Validation(format!(
            "embedding table has {} labels but the backbone predicts {} classes",
            table.num_labels(),
            config.backbone.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let loader = InstrumentedLoader::open(&data_dir, [Split::Train, Split::Val])?;
    let train_samples = loader.load_split(Split::Train, None)?;
    let val_samples = loader.load_split(Split::Val, None)?;

    let mut model = UNet::init(config.backbone.clone(), mix_seed_str(config.seed, "model"))?;
    let mut projection = if config.align.enabled {
        Some(ProjectionParams::init(
            config.backbone.bottleneck_dim(),
            table.dim(),
            mix_seed_str(config.seed, "projection"),
        ))
    } else {
        None
    };
    let table_f64 = config.align.enabled.then(|| table.embeddings_f64());
    let align_cfg = AlignConfig {
        neg_margin: config.align.neg_margin,
        mean_over_cells: config.align.mean_over_cells,
        strict_degenerate: false,
        record_per_cell: false,
    };

    // Feature-level masks depend only on labels and the grid shape.
    let masks: Option<Vec<FeatureLevelMask>> = if config.align.enabled {
        Some(
            train_samples
                .iter()
                .map(|s| {
                    let (h, w) = s.labels.dim();
                    derive_feature_masks(
                        s.labels.view(),
                        config.backbone.grid_shape(h, w),
                        config.backbone.num_classes,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let steps_per_epoch = train_samples.len().div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.value.len()).collect();
    let mut unet_adam = Adam::new(config.optimizer, &sizes);
    let mut proj_adam = projection
        .as_ref()
        .map(|p| Adam::new(config.optimizer, &[p.weight.len(), p.bias.len()]));

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, UNet, Option<ProjectionParams>)> = None;
    let mut skipped_cells_total = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let order = batch_order(config.seed, epoch, train_samples.len(), config.batch_size);
        let mut seg_sum = 0.0;
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut batches = 0.0;
        for (batch_idx, batch) in order.iter().enumerate() {
            let lr = config.optimizer.lr_at(global_step, total_steps);
            let outputs: Result<Vec<SampleOutput>> = batch
                .par_iter()
                .map(|&i| {
                    sample_step(
                        &model,
                        projection.as_ref(),
                        table_f64.as_ref(),
                        masks.as_ref().map(|m| &m[i]),
                        &train_samples[i],
                        config,
                        &align_cfg,
                    )
                })
                .collect();
            let outputs = outputs.map_err(|e| {
                Error::Validation(format!("epoch {epoch} batch {batch_idx}: {e}"))
            })?;

            let b = batch.len() as f64;
            let mut grads = model.params.zero_grads();
            let mut pw = projection.as_ref().map(|p| Array2::<f64>::zeros(p.weight.dim()));
            let mut pb = projection.as_ref().map(|p| Array1::<f64>::zeros(p.bias.len()));
            let mut l_seg = 0.0;
            let mut l_pos = 0.0;
            let mut l_neg = 0.0;
            for out in &outputs {
                grads.add_assign(&out.grads);
                l_seg += out.l_seg;
                if let Some(a) = &out.align {
                    l_pos += a.l_pos;
                    l_neg += a.l_neg;
                    skipped_cells_total += a.skipped_cells;
                }
                if let (Some((dw, db)), Some(pw), Some(pb)) =
                    (&out.proj_grads, pw.as_mut(), pb.as_mut())
                {
                    *pw += dw;
                    *pb += db;
                }
            }
            grads.scale(1.0 / b as f32);
            l_seg /= b;
            l_pos /= b;
            l_neg /= b;
            let align_mean = AlignmentLoss {
                l_pos,
                l_neg,
                l_align: l_pos + l_neg,
                ..zero_alignment()
            };
            let bundle = total_loss(l_seg, &align_mean, config.align.lambda).map_err(|e| match e {
                Error::NonFinite { term } => Error::NonFinite {
                    term: format!(
                        "{term} at epoch {epoch} batch {batch_idx} (scene seeds {:?})",
                        batch
                            .iter()
                            .map(|&i| train_samples[i].scene_seed)
                            .collect::<Vec<_>>()
                    ),
                },
                other => other,
            })?;
            bundle.check()?;
            seg_sum += bundle.l_seg;
            pos_sum += bundle.l_pos;
            neg_sum += bundle.l_neg;
            batches += 1.0;

            {
                let mut param_slices: Vec<&mut [f32]> = model
                    .params
                    .tensors_mut()
                    .iter_mut()
                    .map(|t| t.value.as_slice_mut().expect("standard layout"))
                    .collect();
                let grad_slices: Vec<&[f32]> = grads
                    .0
                    .iter()
                    .map(|g| g.as_slice().expect("standard layout"))
                    .collect();
                unet_adam.step_f32(&mut param_slices, &grad_slices, lr);
            }
            if let (Some(p), Some(adam), Some(pw), Some(pb)) =
                (projection.as_mut(), proj_adam.as_mut(), pw.as_ref(), pb.as_ref())
            {
                let mut dw = pw.mapv(|v| v / b);
                let mut dbias = pb.mapv(|v| v / b);
                let w_slice = p.weight.as_slice_mut().expect("standard layout");
                let b_slice = p.bias.as_slice_mut().expect("standard layout");
                adam.step_f64(
                    &mut [w_slice, b_slice],
                    &[
                        dw.as_slice_mut().expect("standard layout"),
                        dbias.as_slice_mut().expect("standard layout"),
                    ],
                    lr,
                );
            }
            global_step += 1;
        }

        let mean_align = AlignmentLoss {
            l_pos: pos_sum / batches,
            l_neg: neg_sum / batches,
            l_align: pos_sum / batches + neg_sum / batches,
            ..zero_alignment()
        };
        let mean_loss = total_loss(seg_sum / batches, &mean_align, config.align.lambda)?;
        let val_report = evaluate_samples(&model, &val_samples, config.background_id)?;
        let val_dice = val_report.mean_foreground;
        if best.as_ref().map_or(true, |(b, _, _, _)| val_dice > *b) {
            best = Some((val_dice, epoch, model.clone(), projection.clone()));
            let ckpt = build_checkpoint(config, &model, projection.as_ref())?;
            ckpt.save(&out_dir.join(CHECKPOINT_FILE))?;
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            val_dice,
        });
    }

    let (best_val_dice, best_epoch, final_unet, final_proj) = match best {
        Some((dice, epoch, unet, proj)) => (Some(dice), Some(epoch), unet, proj),
        None => (None, None, model, projection),
    };
    let record = RunRecord {
        config_hash: config.config_hash(),
        align_enabled: config.align.enabled,
        seed: config.seed,
        epochs,
        best_val_dice,
        best_epoch,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint_path: best_val_dice.map(|_| out_dir.join(CHECKPOINT_FILE)),
        read_counts: loader.read_counts(),
        skipped_alignment_cells: skipped_cells_total,
    };
    record.save(&out_dir.join(RUN_RECORD_FILE))?;
    config.save(&out_dir.join("config.toml"))?;
    Ok((
        record,
        TrainedModel {
            unet: final_unet,
            projection: final_proj,
            config: config.clone(),
        },
    ))
}

/// Trains and returns the run record (see [`train_full`]).
pub fn train(config: &ExperimentConfig, out_dir: &Path) -> Result<RunRecord> {
    Ok(train_full(config, out_dir)?.0)
}

/// Evaluates a checkpoint on the given split and domains.
pub fn evaluate_split(
    checkpoint: &Path,
    data_dir: &Path,
    domains: &[String],
    split: Split,
) -> Result<BTreeMap<String, DiceReport>> {
    let model = load_trained_model(checkpoint)?;
    let loader = InstrumentedLoader::open(data_dir, [split])?;
    let available = loader.domains(split);
    for d in domains {
        if !available.contains(d) {
            return Err(Error::Validation(format!(
                "unknown domain '{d}' in split '{split}' (available: {})",
                available.join(", ")
            )));
        }
    }
    let mut out = BTreeMap::new();
    for d in domains {
        let samples = loader.load_split(split, Some(d))?;
        out.insert(
            d.clone(),
            evaluate_samples(&model.unet, &samples, model.config.background_id)?,
        );
    }
    Ok(out)
}

/// Evaluates a checkpoint on the test split (the cross-domain protocol).
pub fn evaluate(
    checkpoint: &Path,
    data_dir: &Path,
    domains: &[String],
) -> Result<BTreeMap<String, DiceReport>> {
    evaluate_split(checkpoint, data_dir, domains, Split::Test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_is_deterministic_and_partitions() {
        let a = batch_order(7, 3, 10, 4);
        let b = batch_order(7, 3, 10, 4);
        assert_eq!(a, b);
        let c = batch_order(7, 4, 10, 4);
        assert_ne!(a, c);
        let mut seen: Vec<usize> = a.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].len(), 2);
    }
}
