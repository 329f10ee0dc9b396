use std::path::Path;

use rayon::prelude::*;

use retinareg::dataset::{save_annotations, synth_generate, SynthConfig, SynthPair};
use retinareg::derive_seed;

use crate::config::{to_json, SynthDatasetConfig};
use crate::error::Result;
use crate::evaluate::{Manifest, ManifestEntry};

pub fn pair_id(k: usize) -> String {
    format!("pair_{k:03}")
}

/// Scene settings of pair `k`.
pub fn pair_config(cfg: &SynthDatasetConfig, k: usize) -> SynthConfig {
    SynthConfig {
        modality_b: cfg.modality_b_variants[k % cfg.modality_b_variants.len()].clone(),
        seed: derive_seed(cfg.seed, k as u64),
        ..cfg.scene.clone()
    }
}

fn write_pair(out: &Path, id: &str, pair: &SynthPair) -> Result<ManifestEntry> {
    let (img_a, img_b) = (format!("{id}_a.png"), format!("{id}_b.png"));
    let (ann_a, ann_b) = pair.annotations(&img_a, &img_b);
    pair.img_a.save_png(out.join(&img_a))?;
    pair.img_b.save_png(out.join(&img_b))?;
    let entry = ManifestEntry {
        id: id.to_string(),
        annotation_a: format!("{id}_a.json"),
        annotation_b: format!("{id}_b.json"),
        homography: Some(format!("{id}.h.txt")),
        features_a: None,
        features_b: None,
    };
    save_annotations(&ann_a, out.join(&entry.annotation_a))?;
    save_annotations(&ann_b, out.join(&entry.annotation_b))?;
    let h_path = out.join(format!("{id}.h.txt"));
    std::fs::write(&h_path, pair.homography.to_string())
        .map_err(|e| retinareg::Error::io(&h_path, e))?;
    Ok(entry)
}

/// Renders `count` pairs into `out_dir` with annotations, ground-truth
/// homographies, `manifest.json` and the resolved `synth_config.json`.
pub fn cmd_synth(cfg: &SynthDatasetConfig, count: usize, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| retinareg::Error::io(out_dir, e))?;
    let pairs = (0..count)
        .into_par_iter()
        .map(|k| {
            let pair = synth_generate(&pair_config(cfg, k))?;
            write_pair(out_dir, &pair_id(k), &pair)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { pairs };
    for (name, text) in [
        ("manifest.json", to_json(&manifest)),
        ("synth_config.json", to_json(cfg)),
    ] {
        let p = out_dir.join(name);
        std::fs::write(&p, text).map_err(|e| retinareg::Error::io(&p, e))?;
    }
    Ok(manifest)
}
