use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use retinareg::dataset::{load_annotations, AnnotationSet};
use retinareg::features::{load_feature_map, DenseFeatureMap, ImageBuffer};
use retinareg::matching::{register_pair_detailed, PairRegistration};
use retinareg::metrics::{evaluate_dataset, EvalReport, PairEvaluation};

use crate::config::{to_json, Backend, PipelineConfig};
use crate::error::{CliError, Result};
use crate::extract::extract_image;

/// One registration pair. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub annotation_a: String,
    pub annotation_b: String,
    /// Ground-truth homography text file (A to B), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homography: Option<String>,
    /// Precomputed feature maps replacing extraction from the images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_b: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub pairs: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a manifest and sorts its pairs by id. Duplicate ids are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let schema = |msg: String| retinareg::Error::Schema {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| retinareg::Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| schema(e.to_string()))?;
        m.pairs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut seen = BTreeSet::new();
        for p in &m.pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(schema(format!("duplicate pair id {}", p.id)).into());
            }
        }
        Ok(m)
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

/// Annotations of one side plus the feature map they are evaluated on.
pub struct Side {
    pub annotation: AnnotationSet,
    pub features: DenseFeatureMap,
}

impl Side {
    fn dims(&self) -> (usize, usize) {
        (self.features.source_w(), self.features.source_h())
    }
}

/// Loads the annotation and either the precomputed features or the image.
pub fn load_side(
    base: &Path,
    annotation: &str,
    features: Option<&str>,
    cfg: &PipelineConfig,
) -> Result<Side> {
    let ann_path = resolve(base, annotation);
    let ann = load_annotations(&ann_path)?;
    let fm = match features {
        Some(f) => {
            let fm = load_feature_map(resolve(base, f))?;
            if let Some(d) = cfg.descriptor_dim.filter(|&d| d != fm.descriptor_dim()) {
                return Err(CliError::config(format!(
                    "{f}: descriptor dimension {} but config expects {d}",
                    fm.descriptor_dim()
                )));
            }
            fm
        }
        None if cfg.backend == Backend::File => {
            return Err(CliError::config(format!(
                "{annotation}: backend \"file\" needs features_a/features_b in the manifest"
            )));
        }
        None => {
            let img = ImageBuffer::load_png(ann.image_path(&ann_path))?;
            extract_image(&img, ann.modality, cfg)?
        }
    };
    ann.check_bounds(fm.source_w(), fm.source_h())?;
    Ok(Side {
        annotation: ann,
        features: fm,
    })
}

struct PairRun {
    a: Side,
    b: Side,
    reg: PairRegistration,
}

fn run_pair(base: &Path, e: &ManifestEntry, cfg: &PipelineConfig) -> Result<PairRun> {
    let a = load_side(base, &e.annotation_a, e.features_a.as_deref(), cfg)?;
    let b = load_side(base, &e.annotation_b, e.features_b.as_deref(), cfg)?;
    let reg = register_pair_detailed(&a.features, &b.features, &cfg.registration());
    Ok(PairRun { a, b, reg })
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    config: &'a PipelineConfig,
}

/// One line per pair, in id order.
pub fn pair_log(report: &EvalReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    report
        .pairs
        .iter()
        .map(|p| {
            format!(
                "{} {} {:?} matches={} inliers={} me={} mae={}\n",
                p.id,
                p.modality_pair,
                p.status,
                p.num_matches,
                p.num_inliers,
                fmt(p.mean_error),
                fmt(p.max_error)
            )
        })
        .collect()
}

/// Registers and scores every manifest pair, then writes `report.json` and
/// `report.txt` into `out_dir`. Pairs run concurrently; failed registrations
/// are recorded in the report rather than aborting.
pub fn cmd_evaluate(
    manifest_path: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<EvalReport> {
    let manifest = Manifest::load(manifest_path)?;
    if manifest.pairs.is_empty() {
        return Err(retinareg::Error::Schema {
            path: manifest_path.display().to_string(),
            msg: "manifest lists no pairs".into(),
        }
        .into());
    }
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    let runs = manifest
        .pairs
        .par_iter()
        .map(|e| run_pair(base, e, cfg))
        .collect::<Result<Vec<_>>>()?;

    let evals: Vec<PairEvaluation<'_>> = manifest
        .pairs
        .iter()
        .zip(&runs)
        .map(|(e, r)| PairEvaluation {
            id: e.id.clone(),
            modality_a: r.a.annotation.modality,
            modality_b: r.b.annotation.modality,
            result: &r.reg.result,
            keypoints_a: r.reg.keypoints_a.iter().map(|k| k.pos).collect(),
            keypoints_b: r.reg.keypoints_b.iter().map(|k| k.pos).collect(),
            dims_a: r.a.dims(),
            dims_b: r.b.dims(),
            control_a: &r.a.annotation.control_points,
            control_b: &r.b.annotation.control_points,
        })
        .collect();
    let report = evaluate_dataset(&evals, &cfg.thresholds)?;

    std::fs::create_dir_all(out_dir).map_err(|e| retinareg::Error::io(out_dir, e))?;
    let json = to_json(&ReportFile {
        report: &report,
        config: cfg,
    });
    for (name, text) in [
        ("report.json", json),
        ("report.txt", report.to_text_table()),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| retinareg::Error::io(&p, e))?;
    }
    Ok(report)
}
