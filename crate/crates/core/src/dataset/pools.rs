use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AnnotationSet, Class, PatchSample};
use crate::error::{Error, Result};
use crate::features::{preprocess_image, ImageBuffer};
use crate::geometry::Point2;
use crate::numeric::derive_seed;

/// Background patches are centred farther than this from any vessel keypoint.
pub const BACKGROUND_MIN_DISTANCE: f64 = 16.0;
const BACKGROUND_TRIES_PER_SAMPLE: usize = 200;

#[derive(Debug, Clone, Default)]
pub struct TrainingPools {
    /// Annotated keypoint patches plus one background patch per vessel keypoint.
    pub detector: Vec<PatchSample>,
    /// One patch pair per linked keypoint correspondence.
    pub pairs: Vec<(PatchSample, PatchSample)>,
    /// Missing links and short background draws; not fatal.
    pub warnings: Vec<String>,
}

fn image_patches(
    ann: &AnnotationSet,
    img: &ImageBuffer,
    seed: u64,
) -> (Vec<PatchSample>, Option<String>) {
    let vessels: Vec<Point2> = ann
        .keypoints
        .iter()
        .filter(|k| k.class == Class::Vessel)
        .map(|k| k.pos())
        .collect();
    let mut out: Vec<PatchSample> = ann
        .keypoints
        .iter()
        .map(|k| PatchSample::extract(img, k.pos(), k.class, ann.modality, &ann.image))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (img.width(), img.height());
    let mut drawn = 0;
    for _ in 0..vessels.len() * BACKGROUND_TRIES_PER_SAMPLE {
        if drawn == vessels.len() {
            break;
        }
        let p = Point2::new(rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        if vessels
            .iter()
            .all(|v| v.distance(&p) > BACKGROUND_MIN_DISTANCE)
        {
            out.push(PatchSample::extract(
                img,
                p,
                Class::Background,
                ann.modality,
                &ann.image,
            ));
            drawn += 1;
        }
    }
    let warning = (drawn < vessels.len()).then(|| {
        format!(
            "{}: only {drawn} of {} background patches found",
            ann.image,
            vessels.len()
        )
    });
    (out, warning)
}

/// Builds detector and descriptor pools from annotated images.
///
/// Images are preprocessed for their modality first. Links are followed in
/// both directions but each correspondence contributes one pair.
pub fn build_training_pools(
    items: &[(AnnotationSet, ImageBuffer)],
    seed: u64,
) -> Result<TrainingPools> {
    let mut by_id: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (ann, img)) in items.iter().enumerate() {
        ann.check_bounds(img.width(), img.height())?;
        if by_id.insert(ann.image.as_str(), i).is_some() {
            return Err(Error::Schema {
                path: ann.image.clone(),
                msg: "duplicate image id".into(),
            });
        }
    }
    let prepared: Vec<ImageBuffer> = items
        .par_iter()
        .map(|(ann, img)| preprocess_image(img, ann.modality))
        .collect();
    let per_image: Vec<_> = items
        .par_iter()
        .zip(&prepared)
        .enumerate()
        .map(|(i, ((ann, _), img))| image_patches(ann, img, derive_seed(seed, i as u64)))
        .collect();

    let mut pools = TrainingPools::default();
    for (patches, warning) in per_image {
        pools.detector.extend(patches);
        pools.warnings.extend(warning);
    }

    let mut seen = BTreeSet::new();
    for (i, (ann, _)) in items.iter().enumerate() {
        if ann.links.is_empty() {
            pools
                .warnings
                .push(format!("MissingLink: {} has no pair links", ann.image));
        }
        for link in &ann.links {
            let Some(&j) = by_id.get(link.other.as_str()) else {
                pools.warnings.push(format!(
                    "MissingLink: {} links to unknown image {}",
                    ann.image, link.other
                ));
                continue;
            };
            let other = &items[j].0;
            for &[ki, kj] in &link.index_map {
                if kj >= other.keypoints.len() {
                    return Err(Error::Schema {
                        path: ann.image.clone(),
                        msg: format!("link references keypoint {kj} of {}", other.image),
                    });
                }
                let key = if i <= j {
                    (i, ki, j, kj)
                } else {
                    (j, kj, i, ki)
                };
                if !seen.insert(key) {
                    continue;
                }
                let (pa, pb) = (ann.keypoints[ki], other.keypoints[kj]);
                pools.pairs.push((
                    PatchSample::extract(
                        &prepared[i],
                        pa.pos(),
                        pa.class,
                        ann.modality,
                        &ann.image,
                    ),
                    PatchSample::extract(
                        &prepared[j],
                        pb.pos(),
                        pb.class,
                        other.modality,
                        &other.image,
                    ),
                ));
            }
        }
    }
    Ok(pools)
}
