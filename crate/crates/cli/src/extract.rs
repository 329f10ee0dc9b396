use std::path::Path;

use retinareg::features::io::has_magic;
use retinareg::features::{
    preprocess_image, read_feature_map, reference_extract, save_feature_map, DenseFeatureMap,
    ImageBuffer, Modality,
};

use crate::config::{Backend, PipelineConfig};
use crate::error::{CliError, Result};

/// Features for one side of a pair, and the image when one was given.
pub struct LoadedInput {
    pub features: DenseFeatureMap,
    pub image: Option<ImageBuffer>,
}

fn check_dim(fm: &DenseFeatureMap, cfg: &PipelineConfig, path: &Path) -> Result<()> {
    match cfg.descriptor_dim {
        Some(d) if d != fm.descriptor_dim() => Err(CliError::config(format!(
            "{}: descriptor dimension {} but config expects {d}",
            path.display(),
            fm.descriptor_dim()
        ))),
        _ => Ok(()),
    }
}

/// Runs the reference extractor on an already decoded image.
pub fn extract_image(
    img: &ImageBuffer,
    modality: Modality,
    cfg: &PipelineConfig,
) -> Result<DenseFeatureMap> {
    if cfg.backend == Backend::File {
        return Err(CliError::config(
            "backend \"file\" needs feature-map inputs, got an image",
        ));
    }
    Ok(reference_extract(
        &preprocess_image(img, modality),
        &cfg.extractor,
    )?)
}

/// Accepts either a feature-map file (detected by its magic bytes) or a PNG.
pub fn load_input(path: &Path, modality: Modality, cfg: &PipelineConfig) -> Result<LoadedInput> {
    let bytes = std::fs::read(path).map_err(|e| retinareg::Error::io(path, e))?;
    let loaded = if has_magic(&bytes) {
        LoadedInput {
            features: read_feature_map(&bytes)?,
            image: None,
        }
    } else {
        let img = ImageBuffer::load_png(path)?;
        LoadedInput {
            features: extract_image(&img, modality, cfg)?,
            image: Some(img),
        }
    };
    check_dim(&loaded.features, cfg, path)?;
    Ok(loaded)
}

/// Writes the feature map of `input` to `out`. With the file backend the
/// input must already be a feature map and is copied byte for byte.
pub fn cmd_extract(
    input: &Path,
    modality: Modality,
    out: &Path,
    cfg: &PipelineConfig,
) -> Result<()> {
    if cfg.backend == Backend::File {
        let bytes = std::fs::read(input).map_err(|e| retinareg::Error::io(input, e))?;
        if !has_magic(&bytes) {
            return Err(CliError::config(format!(
                "{}: backend \"file\" expects a feature-map file",
                input.display()
            )));
        }
        let fm = read_feature_map(&bytes)?;
        check_dim(&fm, cfg, input)?;
        std::fs::write(out, &bytes).map_err(|e| retinareg::Error::io(out, e))?;
        return Ok(());
    }
    let loaded = load_input(input, modality, cfg)?;
    if loaded.image.is_none() {
        return Err(CliError::config(format!(
            "{}: the reference backend needs an image",
            input.display()
        )));
    }
    save_feature_map(&loaded.features, out)?;
    Ok(())
}
