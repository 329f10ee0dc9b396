use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use retinareg::dataset::{build_training_pools, load_annotations, AnnotationSet, TrainingPools};
use retinareg::derive_seed;
use retinareg::features::ImageBuffer;
use retinareg::losses::{loss_curve_csv, mutual_nn_precision, toy_train, ToyDataset, TrainOutcome};

use crate::config::{to_json, TrainToyConfig};
use crate::error::Result;
use crate::evaluate::{Manifest, ManifestEntry};

pub const PARAMS_FILE: &str = "toy_params.bin";
pub const CURVE_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "train.json";

pub struct ToyRun {
    pub outcome: TrainOutcome,
    /// Mutual-NN precision of the returned parameters on the validation pairs.
    pub precision: f64,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct TrainReport<'a> {
    train_pairs: Vec<&'a str>,
    validation_pairs: Vec<&'a str>,
    detector_patches: [usize; 2],
    positive_pairs: [usize; 2],
    best_epoch: usize,
    epochs_run: usize,
    validation_precision: f64,
    warnings: &'a [String],
    config: &'a TrainToyConfig,
}

fn load_items(base: &Path, entries: &[ManifestEntry]) -> Result<Vec<(AnnotationSet, ImageBuffer)>> {
    let paths: Vec<_> = entries
        .iter()
        .flat_map(|e| [&e.annotation_a, &e.annotation_b])
        .map(|a| base.join(a))
        .collect();
    paths
        .par_iter()
        .map(|p| {
            let ann = load_annotations(p)?;
            let img = ImageBuffer::load_png(ann.image_path(p))?;
            Ok((ann, img))
        })
        .collect()
}

fn pools(base: &Path, entries: &[ManifestEntry], seed: u64) -> Result<TrainingPools> {
    Ok(build_training_pools(&load_items(base, entries)?, seed)?)
}

/// Splits the dataset's pairs into training and validation sets (the last
/// pairs by id validate), trains the toy embedder and writes the parameters,
/// the loss curve and a JSON summary into `out_dir`.
pub fn cmd_train_toy(dataset_dir: &Path, cfg: &TrainToyConfig, out_dir: &Path) -> Result<ToyRun> {
    let manifest = Manifest::load(&dataset_dir.join("manifest.json"))?;
    let n = manifest.pairs.len();
    if n < 2 {
        return Err(retinareg::Error::EmptyDataset("need at least two image pairs").into());
    }
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let (train_e, val_e) = manifest.pairs.split_at(n - n_val);
    let seed = cfg.train.seed;
    let train_pools = pools(dataset_dir, train_e, derive_seed(seed, 1))?;
    let val_pools = pools(dataset_dir, val_e, derive_seed(seed, 2))?;
    let mut warnings = train_pools.warnings.clone();
    warnings.extend(val_pools.warnings.iter().cloned());
    let train = ToyDataset {
        detector: train_pools.detector,
        pairs: train_pools.pairs,
    };
    let val = ToyDataset {
        detector: val_pools.detector,
        pairs: val_pools.pairs,
    };

    let outcome = toy_train(&train, &val, &cfg.train, &cfg.loss)?;
    let precision = mutual_nn_precision(&outcome.params, &val.pairs);

    std::fs::create_dir_all(out_dir).map_err(|e| retinareg::Error::io(out_dir, e))?;
    outcome.params.save(out_dir.join(PARAMS_FILE))?;
    let report = TrainReport {
        train_pairs: train_e.iter().map(|e| e.id.as_str()).collect(),
        validation_pairs: val_e.iter().map(|e| e.id.as_str()).collect(),
        detector_patches: [train.detector.len(), val.detector.len()],
        positive_pairs: [train.pairs.len(), val.pairs.len()],
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.curve.len() - 1,
        validation_precision: precision,
        warnings: &warnings,
        config: cfg,
    };
    for (name, text) in [
        (CURVE_FILE, loss_curve_csv(&outcome.curve)),
        (REPORT_FILE, to_json(&report)),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| retinareg::Error::io(&p, e))?;
    }
    Ok(ToyRun {
        outcome,
        precision,
        warnings,
    })
}
