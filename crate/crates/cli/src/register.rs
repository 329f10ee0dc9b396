use std::path::{Path, PathBuf};

use serde::Serialize;

use retinareg::dataset::warp_image;
use retinareg::features::{ImageBuffer, Modality};
use retinareg::matching::{register_pair_detailed, RegistrationResult, RegistrationStatus};
use retinareg::metrics::matching_inlier_ratio;
use retinareg::Homography;

use crate::config::{to_json, PipelineConfig};
use crate::error::Result;
use crate::extract::load_input;

/// Side length of the overlay checkerboard squares, pixels.
pub const OVERLAY_TILE: usize = 32;

#[derive(Debug, Clone)]
pub struct RegisterArgs {
    pub input_a: PathBuf,
    pub input_b: PathBuf,
    pub modality_a: Modality,
    pub modality_b: Modality,
    /// Output prefix; files are written as `<prefix>.h.txt`, `<prefix>.json`
    /// and `<prefix>.overlay.png`.
    pub out: PathBuf,
    pub overlay: bool,
}

#[derive(Serialize)]
struct MatchRecord {
    idx_a: usize,
    idx_b: usize,
    distance: f64,
    inlier: bool,
}

#[derive(Serialize)]
struct RegisterReport<'a> {
    status: RegistrationStatus,
    seed: u64,
    modality_a: Modality,
    modality_b: Modality,
    keypoints_a: usize,
    keypoints_b: usize,
    num_matches: usize,
    num_inliers: usize,
    mir: f64,
    homography: Option<[[f64; 3]; 3]>,
    matches: Vec<MatchRecord>,
    config: &'a PipelineConfig,
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Alternating squares of `a` and of `b` resampled into the frame of `a`.
pub fn checkerboard_overlay(a: &ImageBuffer, b: &ImageBuffer, a_to_b: &Homography) -> ImageBuffer {
    let (w, h) = (a.width(), a.height());
    let ga = ImageBuffer::from_grid(&a.to_gray());
    let gb = ImageBuffer::from_grid(&b.to_gray());
    let warped = warp_image(&gb, a_to_b, w, h, Some(0.0));
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let from_b = (x / OVERLAY_TILE + y / OVERLAY_TILE) % 2 == 1;
            data.push(if from_b {
                warped.pixel(x, y, 0)
            } else {
                ga.pixel(x, y, 0)
            });
        }
    }
    ImageBuffer::new(w, h, 1, data).expect("buffer sized to the image")
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| retinareg::Error::io(path, e))?;
    Ok(())
}

/// Registers B onto A and writes the result files. Returns the result even
/// when registration failed; the caller maps the status to an exit code.
pub fn cmd_register(args: &RegisterArgs, cfg: &PipelineConfig) -> Result<RegistrationResult> {
    let a = load_input(&args.input_a, args.modality_a, cfg)?;
    let b = load_input(&args.input_b, args.modality_b, cfg)?;
    let overlay_images = match (args.overlay, &a.image, &b.image) {
        (false, ..) => None,
        (true, Some(ia), Some(ib)) => Some((ia, ib)),
        (true, ..) => {
            return Err(crate::error::CliError::config(
                "--overlay needs image inputs",
            ))
        }
    };
    let reg = register_pair_detailed(&a.features, &b.features, &cfg.registration());
    let r = reg.result;

    let report = RegisterReport {
        status: r.status,
        seed: r.seed,
        modality_a: args.modality_a,
        modality_b: args.modality_b,
        keypoints_a: r.keypoints_a,
        keypoints_b: r.keypoints_b,
        num_matches: r.matches.len(),
        num_inliers: r.num_inliers(),
        mir: matching_inlier_ratio(r.num_inliers(), r.matches.len())?,
        homography: r.homography.as_ref().map(|h| h.rows()),
        matches: r
            .matches
            .iter()
            .zip(&r.inlier_mask)
            .map(|(m, &inlier)| MatchRecord {
                idx_a: m.idx_a,
                idx_b: m.idx_b,
                distance: m.distance,
                inlier,
            })
            .collect(),
        config: cfg,
    };
    write(&with_suffix(&args.out, ".json"), &to_json(&report))?;
    if let Some(h) = &r.homography {
        write(&with_suffix(&args.out, ".h.txt"), &h.to_string())?;
        if let Some((ia, ib)) = overlay_images {
            checkerboard_overlay(ia, ib, h).save_png(with_suffix(&args.out, ".overlay.png"))?;
        }
    }
    Ok(r)
}
