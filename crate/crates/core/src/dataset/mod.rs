//! Annotations, training patches, augmentation and a synthetic multi-modal
//! vessel-image generator.

mod annotations;
mod augment;
mod patches;
mod pools;
mod synth;

use serde::{Deserialize, Serialize};

pub use annotations::{
    load_annotations, save_annotations, AnnotatedKeypoint, AnnotationSet, Link, Split,
};
pub use augment::{
    augment_pair, augment_single, warp_image, AugmentConfig, FlipMode, PairAugmentation,
};
pub use patches::{extract_patch, PatchSample, PATCH_LEN, PATCH_SIZE};
pub use pools::{build_training_pools, TrainingPools, BACKGROUND_MIN_DISTANCE};
pub use synth::{synth_generate, ModalityTransform, SynthConfig, SynthPair, WarpConfig};

/// Detector class of a keypoint or patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Vessel,
    Background,
}

impl Class {
    /// Position of the class in a `[vessel, background]` logit pair.
    pub fn index(self) -> usize {
        match self {
            Class::Vessel => 0,
            Class::Background => 1,
        }
    }
}
